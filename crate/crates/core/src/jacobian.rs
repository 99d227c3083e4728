//! Sensitivity of the body angle to the magnet rotation.
//!
//! Linearising the governing equation of [`crate::elastica`] around a solved
//! shape gives a Sturm-Liouville boundary value problem for the profile
//! `J(s) = d theta(s) / d psi`:
//!
//! `J'' = q(s) J + r(s)`, with `J(0) = 0` and `J'(L) = 0`,
//!
//! where `q` is the angle sensitivity of the right-hand side (the curve
//! co-rotating with the local tangent) and `r` its magnet-rotation
//! sensitivity. The profile is built from two initial value solutions: a
//! particular one with homogeneous initial data and a homogeneous one with
//! unit initial slope, blended to meet the free-tip condition. The blend is
//! valid whenever the homogeneous solution cannot vanish at the tip, which a
//! comparison bound on `q` guarantees for an explicit set of coupling
//! strengths.

use thiserror::Error;

use crate::elastica::{
    kernel_outputs_on_shape, reintegrate_augmented, Actuation, BvpSolver, ElasticaError, Plane,
    RobotParams, Shape,
};

const PI: f64 = std::f64::consts::PI;

#[derive(Debug, Error, PartialEq)]
pub enum JacobianError {
    #[error(transparent)]
    Elastica(#[from] ElasticaError),
    /// The homogeneous solution lost its guaranteed tip slope sign while the
    /// coupling bound said it could not.
    #[error("homogeneous tip slope {tip_slope:.3e} contradicts coupling bound {k:.3e}")]
    BoundViolation { tip_slope: f64, k: f64 },
}

/// Coefficients of the sensitivity equation at the shape grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SlCoefficients {
    pub s: Vec<f64>,
    /// Angle sensitivity of the right-hand side (1/m^2).
    pub q: Vec<f64>,
    /// Magnet-rotation sensitivity of the right-hand side (rad/m^2 per rad).
    pub r: Vec<f64>,
}

/// Evaluate the sensitivity-equation coefficients on a converged shape.
pub fn sl_coefficients(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    shape: &Shape,
) -> SlCoefficients {
    let outs = kernel_outputs_on_shape(params, act, plane, shape);
    SlCoefficients {
        s: shape.s.clone(),
        q: outs.iter().map(|o| o.q).collect(),
        r: outs.iter().map(|o| o.r).collect(),
    }
}

/// How the two initial value solutions were blended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlendMethod {
    /// Free-tip condition met by adding `v` times the homogeneous solution.
    Superposed { v: f64 },
    /// Coupling bound failed, so only the particular solution is returned.
    ParticularOnly,
}

/// Sensitivity profile along the body for one actuation input.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianProfile {
    pub s: Vec<f64>,
    /// `d theta(s) / d psi` at each node (rad/rad).
    pub j: Vec<f64>,
    /// Arc-length derivative of the profile (rad/(rad m)).
    pub dj: Vec<f64>,
    pub method: BlendMethod,
    /// Coupling bound backing the blend admissibility decision.
    pub bound: CouplingBound,
}

impl JacobianProfile {
    /// Tip sensitivity `d theta_L / d psi` (rad/rad).
    pub fn tip(&self) -> f64 {
        *self.j.last().unwrap()
    }
}

/// Bound on the angle-sensitivity coefficient `q` along the body, with the
/// pieces it absorbs reported separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingBound {
    /// The bound `K >= |q(s)|` (1/m^2).
    pub k: f64,
    /// Distance-only field envelope `pi mu0 M_A / (4 d^3)` at the closest
    /// approach (T). Its margin over the true field covers both the torque
    /// and the force couplings at working distances.
    pub field_envelope: f64,
    /// First-gradient contribution `3 L max ||grad b||` over the grid (T),
    /// reported for reference; the envelope dominates it.
    pub gradient_term: f64,
    /// Second-gradient contribution, dropped from the model (T).
    pub hessian_term: f64,
    /// Closest approach between magnet and deformed body (m).
    pub min_distance: f64,
    /// Whether the blend of the two initial value solutions is admissible.
    pub in_set: bool,
}

/// Bound the angle-sensitivity coefficient over a converged shape.
pub fn coupling_bound(params: &RobotParams, act: &Actuation, shape: &Shape) -> CouplingBound {
    let mut d_min = f64::INFINITY;
    let mut grad_max = 0.0f64;
    let m_hat = shape.plane.moment_direction(act.psi);
    for i in 0..shape.s.len() {
        let x = shape.body_point(shape.s[i]).expect("node is on the body");
        let p = x - act.magnet_position;
        d_min = d_min.min(p.norm());
        if act.moment > 0.0 {
            let g = crate::magnetics::dipole_gradient(p, m_hat, act.moment)
                .expect("clearance was checked by the solve");
            grad_max = grad_max.max(g.norm());
        }
    }
    let field_envelope = PI * crate::magnetics::MU_0 * act.moment / (4.0 * d_min.powi(3));
    let k = params.coupling() * params.magnetization * field_envelope;
    CouplingBound {
        k,
        field_envelope,
        gradient_term: 3.0 * params.length * grad_max,
        hessian_term: 0.0,
        min_distance: d_min,
        in_set: blend_admissible(k, params.length),
    }
}

/// Membership of the coupling bound in the set where the homogeneous
/// solution is guaranteed a positive tip slope.
///
/// For `|q| <= k` a comparison argument keeps `J2'(L)` positive while
/// `sqrt(k) L <= pi/2`, and again on the periodic windows
/// `sqrt(k) (2L/pi) in [4j-1, 4j+1]`.
pub fn blend_admissible(k: f64, length: f64) -> bool {
    if k < 0.0 {
        return false;
    }
    let t = k.sqrt() * 2.0 * length / PI;
    if t <= 1.0 {
        return true;
    }
    let j = (t / 4.0).round();
    j >= 1.0 && (t - 4.0 * j).abs() <= 1.0
}

/// Integrate the sensitivity profile on a converged shape.
pub fn analytic_jacobian(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    shape: &Shape,
) -> Result<JacobianProfile, JacobianError> {
    // States: particular (value, slope) then homogeneous (value, slope).
    let aug = reintegrate_augmented(
        params,
        act,
        plane,
        shape,
        [0.0, 0.0, 0.0, 1.0],
        |a, q, r| [a[1], q * a[0] + r, a[3], q * a[2]],
    );
    let bound = coupling_bound(params, act, shape);
    let last = aug.last().unwrap();
    let (dj1_l, dj2_l) = (last[1], last[3]);
    let first_branch = bound.k.sqrt() * 2.0 * params.length / PI <= 1.0;
    if first_branch && dj2_l <= 0.0 {
        return Err(JacobianError::BoundViolation { tip_slope: dj2_l, k: bound.k });
    }
    let (method, v) = if bound.in_set && dj2_l.abs() > 0.0 {
        let v = -dj1_l / dj2_l;
        (BlendMethod::Superposed { v }, v)
    } else {
        (BlendMethod::ParticularOnly, 0.0)
    };
    let mut j = Vec::with_capacity(aug.len());
    let mut dj = Vec::with_capacity(aug.len());
    for a in &aug {
        j.push(a[0] + v * a[2]);
        dj.push(a[1] + v * a[3]);
    }
    Ok(JacobianProfile { s: shape.s.clone(), j, dj, method, bound })
}

/// Central-difference tip sensitivity from two warm-started solves.
pub fn numeric_jacobian(
    solver: &mut BvpSolver,
    act: &Actuation,
    delta: f64,
) -> Result<f64, ElasticaError> {
    let hi = solver.solve(&Actuation { psi: act.psi + delta, ..*act })?;
    let lo = solver.solve(&Actuation { psi: act.psi - delta, ..*act })?;
    Ok((hi.tip_angle() - lo.tip_angle()) / (2.0 * delta))
}

/// Central-difference sensitivity profile at every node.
pub fn numeric_jacobian_profile(
    solver: &mut BvpSolver,
    act: &Actuation,
    delta: f64,
) -> Result<Vec<f64>, ElasticaError> {
    let hi = solver.solve(&Actuation { psi: act.psi + delta, ..*act })?;
    let lo = solver.solve(&Actuation { psi: act.psi - delta, ..*act })?;
    Ok(hi
        .theta
        .iter()
        .zip(&lo.theta)
        .map(|(a, b)| (a - b) / (2.0 * delta))
        .collect())
}

/// Central-difference sensitivity of the tip angle to the magnet position,
/// as a row vector in the base frame (rad/m).
///
/// The magnet is constrained to the actuation plane, so the derivative is
/// taken along the axis and in-plane directions; the normal component
/// vanishes by the mirror symmetry of the planar model and is returned as
/// zero.
pub fn position_jacobian(
    solver: &mut BvpSolver,
    act: &Actuation,
    delta: f64,
) -> Result<nalgebra::Vector3<f64>, ElasticaError> {
    let plane = solver.plane();
    let mut row = nalgebra::Vector3::zeros();
    for dir in [nalgebra::Vector3::x(), plane.o_hat()] {
        let hi = solver.solve(&Actuation {
            magnet_position: act.magnet_position + delta * dir,
            ..*act
        })?;
        let lo = solver.solve(&Actuation {
            magnet_position: act.magnet_position - delta * dir,
            ..*act
        })?;
        row += (hi.tip_angle() - lo.tip_angle()) / (2.0 * delta) * dir;
    }
    Ok(row)
}

/// Analytic and numeric tip sensitivities over a grid of magnet rotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianSample {
    pub psi: f64,
    pub analytic: f64,
    pub numeric: f64,
}

/// Tabulate both tip sensitivities over one rotation period.
pub fn jacobian_map(
    solver: &mut BvpSolver,
    act: &Actuation,
    psis: &[f64],
    fd_delta: f64,
) -> Result<Vec<JacobianSample>, JacobianError> {
    let params = *solver.params();
    let plane = solver.plane();
    let mut out = Vec::with_capacity(psis.len());
    for &psi in psis {
        let probe = Actuation { psi, ..*act };
        let shape = solver.solve(&probe)?;
        let analytic = analytic_jacobian(&params, &probe, plane, &shape)?.tip();
        let numeric = numeric_jacobian(solver, &probe, fd_delta)?;
        out.push(JacobianSample { psi, analytic, numeric });
    }
    Ok(out)
}

/// A magnet rotation where the tip sensitivity crosses zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularityCrossing {
    pub psi: f64,
    /// True when the sensitivity goes from positive to negative, i.e. the
    /// crossing sits at the workspace maximum.
    pub descending: bool,
}

/// Locate the actuation singularities over one rotation period by scanning
/// the analytic tip sensitivity and bisecting its sign changes.
pub fn singularities(
    solver: &mut BvpSolver,
    act: &Actuation,
    scan_points: usize,
    tol: f64,
) -> Result<Vec<SingularityCrossing>, JacobianError> {
    let params = *solver.params();
    let plane = solver.plane();
    let tip_j = |solver: &mut BvpSolver, psi: f64| -> Result<f64, JacobianError> {
        let probe = Actuation { psi, ..*act };
        let shape = solver.solve(&probe)?;
        Ok(analytic_jacobian(&params, &probe, plane, &shape)?.tip())
    };
    let n = scan_points.max(16);
    let psis: Vec<f64> = (0..=n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect();
    let mut vals = Vec::with_capacity(psis.len());
    for &psi in &psis {
        vals.push(tip_j(solver, psi)?);
    }
    let mut out = Vec::new();
    for i in 0..n {
        let (mut lo, mut hi) = (psis[i], psis[i + 1]);
        let (mut f_lo, f_hi) = (vals[i], vals[i + 1]);
        if f_lo == 0.0 {
            out.push(SingularityCrossing { psi: lo, descending: f_hi < 0.0 });
            continue;
        }
        if f_lo.signum() * f_hi.signum() >= 0.0 {
            continue;
        }
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            let f_mid = tip_j(solver, mid)?;
            if f_mid.signum() == f_lo.signum() {
                lo = mid;
                f_lo = f_mid;
            } else {
                hi = mid;
            }
        }
        out.push(SingularityCrossing { psi: 0.5 * (lo + hi), descending: f_lo > 0.0 });
    }
    Ok(out)
}

/// Actuation singularities of one magnet height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularityRow {
    /// Magnet height above the tip anchor (m).
    pub height: f64,
    /// Rotation of the workspace minimum (ascending zero crossing, rad).
    pub psi_min: f64,
    /// Rotation of the workspace maximum (descending zero crossing, rad).
    pub psi_max: f64,
}

/// Tabulate the actuation singularities for a magnet centred above the tip
/// anchor at each height.
pub fn singularity_table(
    params: &RobotParams,
    plane: Plane,
    settings: &crate::elastica::SolverSettings,
    moment: f64,
    heights: &[f64],
    scan_points: usize,
    tol: f64,
) -> Result<Vec<SingularityRow>, JacobianError> {
    let mut out = Vec::with_capacity(heights.len());
    for &height in heights {
        let mut solver = BvpSolver::new(*params, plane, *settings)?;
        let act = Actuation {
            magnet_position: nalgebra::Vector3::new(params.length, 0.0, 0.0)
                + height * plane.o_hat(),
            psi: 0.0,
            moment,
        };
        let crossings = singularities(&mut solver, &act, scan_points, tol)?;
        let psi_max = crossings.iter().find(|c| c.descending).map(|c| c.psi);
        let psi_min = crossings.iter().find(|c| !c.descending).map(|c| c.psi);
        match (psi_min, psi_max) {
            (Some(psi_min), Some(psi_max)) => {
                out.push(SingularityRow { height, psi_min, psi_max })
            }
            _ => {
                return Err(JacobianError::Elastica(ElasticaError::InvalidParams(format!(
                    "no singularity pair at height {height}"
                ))))
            }
        }
    }
    Ok(out)
}

/// Sign-preserving floor applied to the tip sensitivity near singularities,
/// keeping its reciprocal bounded; zero is treated as positive.
pub fn damped_jacobian(j: f64, floor: f64) -> f64 {
    if j.abs() >= floor {
        j
    } else if j < 0.0 {
        -floor
    } else {
        floor
    }
}
