//! Point-dipole model of the rotating actuator magnet.
//!
//! The actuator is a cylindrical permanent magnet spun about a fixed axis; at
//! the working distances of interest (an order of magnitude beyond its own
//! radius) it is modelled as a point dipole with moment magnitude `M_A`. The
//! module provides the field and field-gradient maps, their input-separated
//! operator forms (matrices that act on the unit moment direction), and a
//! least-squares calibration of `M_A` from on-axis flux-density samples.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Vacuum permeability in T·m/A.
pub const MU_0: f64 = 4.0e-7 * std::f64::consts::PI;

#[derive(Debug, Error, PartialEq)]
pub enum MagneticsError {
    /// The field point coincides with the dipole centre.
    #[error("field requested at the dipole centre")]
    ZeroDistance,
    /// No calibration samples fall inside the working range.
    #[error("no calibration samples inside [{min} m, {max} m]")]
    EmptyRange { min: f64, max: f64 },
    /// A calibration sample has a non-positive distance or non-finite value.
    #[error("invalid calibration sample at row {row}")]
    InvalidSample { row: usize },
}

/// Frame in which a moment direction is expressed.
///
/// The actuator frame has its z axis on the rotation axis of the magnet; the
/// robot base frame sees that axis reversed, so the x component flips sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentFrame {
    /// Magnet's own frame: `[cos psi, sin psi, 0]`.
    Actuator,
    /// Robot base frame at zero plane roll: `[-cos psi, sin psi, 0]`.
    Base,
}

/// Unit moment direction for rotation angle `psi` (rad) in the given frame.
pub fn unit_moment(psi: f64, frame: MomentFrame) -> Vector3<f64> {
    let (s, c) = psi.sin_cos();
    match frame {
        MomentFrame::Actuator => Vector3::new(c, s, 0.0),
        MomentFrame::Base => Vector3::new(-c, s, 0.0),
    }
}

/// Derivative of [`unit_moment`] with respect to `psi`.
pub fn unit_moment_dpsi(psi: f64, frame: MomentFrame) -> Vector3<f64> {
    let (s, c) = psi.sin_cos();
    match frame {
        MomentFrame::Actuator => Vector3::new(-s, c, 0.0),
        MomentFrame::Base => Vector3::new(s, c, 0.0),
    }
}

/// A permanent magnet reduced to a point dipole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipoleMagnet {
    /// Dipole centre position (m).
    pub position: Vector3<f64>,
    /// Rotation angle of the moment about the spin axis (rad).
    pub psi: f64,
    /// Moment magnitude `M_A` (A·m²).
    pub moment: f64,
}

impl DipoleMagnet {
    /// Flux density at `point`, with the moment direction taken in `frame`.
    pub fn field_at(
        &self,
        point: Vector3<f64>,
        frame: MomentFrame,
    ) -> Result<Vector3<f64>, MagneticsError> {
        dipole_field(point - self.position, unit_moment(self.psi, frame), self.moment)
    }

    /// Spatial field gradient at `point`.
    pub fn gradient_at(
        &self,
        point: Vector3<f64>,
        frame: MomentFrame,
    ) -> Result<Matrix3<f64>, MagneticsError> {
        dipole_gradient(point - self.position, unit_moment(self.psi, frame), self.moment)
    }
}

fn check_distance(p: Vector3<f64>) -> Result<f64, MagneticsError> {
    let d = p.norm();
    if d == 0.0 {
        Err(MagneticsError::ZeroDistance)
    } else {
        Ok(d)
    }
}

/// Dipole flux density `b` (T) at displacement `p` from the dipole centre.
///
/// `b = mu0 M_A / (4 pi |p|^3) (3 p_hat p_hat^T - I) m_hat`, with `m_hat` the
/// unit moment direction. On the dipole axis this reduces to a magnitude of
/// `mu0 M_A / (2 pi |p|^3)`.
pub fn dipole_field(
    p: Vector3<f64>,
    m_hat: Vector3<f64>,
    moment: f64,
) -> Result<Vector3<f64>, MagneticsError> {
    let d = check_distance(p)?;
    let p_hat = p / d;
    let coeff = MU_0 * moment / (4.0 * std::f64::consts::PI * d.powi(3));
    Ok(coeff * (3.0 * p_hat.dot(&m_hat) * p_hat - m_hat))
}

/// Spatial gradient of the dipole field (T/m), the matrix `db_i/dp_j`.
///
/// `grad b = 3 mu0 M_A / (4 pi |p|^4) (p_hat m_hat^T + m_hat p_hat^T
/// + (p_hat . m_hat)(I - 5 p_hat p_hat^T))`; symmetric and traceless, as any
/// curl-free, divergence-free field gradient must be. On the dipole axis the
/// mixed components vanish and the diagonal carries the whole decay.
pub fn dipole_gradient(
    p: Vector3<f64>,
    m_hat: Vector3<f64>,
    moment: f64,
) -> Result<Matrix3<f64>, MagneticsError> {
    let d = check_distance(p)?;
    let p_hat = p / d;
    let coeff = 3.0 * MU_0 * moment / (4.0 * std::f64::consts::PI * d.powi(4));
    let pm = p_hat.dot(&m_hat);
    let outer_pm = p_hat * m_hat.transpose();
    let outer_pp = p_hat * p_hat.transpose();
    Ok(coeff
        * (outer_pm + outer_pm.transpose() + pm * (Matrix3::identity() - 5.0 * outer_pp)))
}

/// Input-separated field operator `B(p)` (T), so that `b = B(p) m_hat`.
pub fn field_operator(p: Vector3<f64>, moment: f64) -> Result<Matrix3<f64>, MagneticsError> {
    let d = check_distance(p)?;
    let p_hat = p / d;
    let coeff = MU_0 * moment / (4.0 * std::f64::consts::PI * d.powi(3));
    Ok(coeff * (3.0 * p_hat * p_hat.transpose() - Matrix3::identity()))
}

/// Input-separated gradient operator `Bg(p, v)` (T/m), so that
/// `(grad b)^T v = Bg(p, v) m_hat` for any fixed vector `v`.
///
/// `Bg = 3 mu0 M_A / (4 pi |p|^4) (p_hat v^T + v p_hat^T + (p_hat . v) Z)`
/// with `Z = I - 5 p_hat p_hat^T`.
pub fn gradient_operator(
    p: Vector3<f64>,
    v: Vector3<f64>,
    moment: f64,
) -> Result<Matrix3<f64>, MagneticsError> {
    let d = check_distance(p)?;
    let p_hat = p / d;
    let coeff = 3.0 * MU_0 * moment / (4.0 * std::f64::consts::PI * d.powi(4));
    let z = Matrix3::identity() - 5.0 * p_hat * p_hat.transpose();
    Ok(coeff * (p_hat * v.transpose() + v * p_hat.transpose() + p_hat.dot(&v) * z))
}

/// On-axis flux-density magnitude `mu0 M_A / (2 pi d^3)` at distance `d` (m).
pub fn on_axis_magnitude(d: f64, moment: f64) -> f64 {
    MU_0 * moment / (2.0 * std::f64::consts::PI * d.powi(3))
}

/// One bench measurement of on-axis flux density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Distance from the magnet centre along its axis (m).
    pub distance: f64,
    /// Measured flux-density magnitude (T).
    pub magnitude: f64,
}

/// Distance window over which calibration samples are kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingRange {
    pub min: f64,
    pub max: f64,
}

impl Default for WorkingRange {
    /// Working range of the actuation system, 100 mm to 250 mm.
    fn default() -> Self {
        Self { min: 0.100, max: 0.250 }
    }
}

impl WorkingRange {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }
}

/// Result of a moment calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFit {
    /// Estimated moment magnitude `M_A` (A·m²).
    pub moment: f64,
    /// Root-mean-square residual of the fit (T).
    pub rms_residual: f64,
    /// Number of samples inside the working range.
    pub samples_used: usize,
}

/// Least-squares estimate of the dipole moment from on-axis samples.
///
/// Minimises `sum (B_E(d) - mu0 M_A / (2 pi d^3))^2` over samples inside
/// `range`. The model is linear in `M_A`, so the minimiser is the closed form
/// `M_A = sum(B_E g) / sum(g^2)` with `g(d) = mu0 / (2 pi d^3)`.
pub fn calibrate_moment(
    samples: &[FieldSample],
    range: WorkingRange,
) -> Result<CalibrationFit, MagneticsError> {
    for (row, s) in samples.iter().enumerate() {
        if !(s.distance.is_finite() && s.magnitude.is_finite()) || s.distance <= 0.0 {
            return Err(MagneticsError::InvalidSample { row });
        }
    }
    let kept: Vec<&FieldSample> =
        samples.iter().filter(|s| range.contains(s.distance)).collect();
    if kept.is_empty() {
        return Err(MagneticsError::EmptyRange { min: range.min, max: range.max });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for s in &kept {
        let g = MU_0 / (2.0 * std::f64::consts::PI * s.distance.powi(3));
        num += s.magnitude * g;
        den += g * g;
    }
    let moment = num / den;
    let ss: f64 = kept
        .iter()
        .map(|s| {
            let r = s.magnitude - on_axis_magnitude(s.distance, moment);
            r * r
        })
        .sum();
    Ok(CalibrationFit {
        moment,
        rms_residual: (ss / kept.len() as f64).sqrt(),
        samples_used: kept.len(),
    })
}
