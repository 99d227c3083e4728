//! Hard-magnetic elastica model of the robot body.
//!
//! The robot is an inextensible slender rod, clamped at its base, magnetised
//! along its undeformed axis, and deflecting inside a fixed actuation plane.
//! Balancing bending energy per volume `EI/(2A) theta'^2` against the
//! magnetic interaction energy `-(R m) . b` gives the governing equation
//!
//! `(EI/A) theta'' = -d/dtheta [ (R m) . b ]`
//!
//! with `theta(0) = 0` at the clamp and `theta'(L) = 0` at the free tip. The
//! right-hand side couples the local frame rotation (torque on the embedded
//! magnetisation) and the field gradient sampled along the deformed curve
//! (force term), so the equation is solved as an initial value problem in the
//! extended state `(theta, theta', int cos theta, int sin theta)` with the
//! unknown base curvature found by shooting.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::magnetics::MU_0;

const PI: f64 = std::f64::consts::PI;

#[derive(Debug, Error, PartialEq)]
pub enum ElasticaError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    /// The magnet centre is off the actuation plane.
    #[error("magnet centre is {offset:.3e} m off the actuation plane")]
    MagnetOffPlane { offset: f64 },
    /// The magnet is within one grid cell of the body curve.
    #[error("magnet is {distance:.3e} m from the body, below the {limit:.3e} m clearance")]
    MagnetTooClose { distance: f64, limit: f64 },
    /// Shooting failed to drive the tip curvature residual under tolerance.
    #[error("shooting did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    /// Arc-length query outside `[0, L]`.
    #[error("arc length {s} outside the body")]
    OutOfDomain { s: f64 },
}

/// Geometric and material parameters of one robot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotParams {
    /// Body length `L` (m).
    pub length: f64,
    /// Cross-section radius `r` (m).
    pub radius: f64,
    /// Young's modulus `E` (Pa).
    pub youngs_modulus: f64,
    /// Magnetisation magnitude `M` along the undeformed axis (A/m).
    pub magnetization: f64,
}

impl RobotParams {
    /// 24 mm x 1.08 mm robot, E = 3.0 MPa, M = 8.0 kA/m.
    pub fn mscr1() -> Self {
        Self { length: 0.024, radius: 0.54e-3, youngs_modulus: 3.0e6, magnetization: 8.0e3 }
    }

    /// 30 mm x 1.30 mm robot, E = 2.8 MPa, M = 9.3 kA/m.
    pub fn mscr2() -> Self {
        Self { length: 0.030, radius: 0.65e-3, youngs_modulus: 2.8e6, magnetization: 9.3e3 }
    }

    /// Cross-section area (m^2).
    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    /// Second moment of area (m^4).
    pub fn second_moment(&self) -> f64 {
        PI * self.radius.powi(4) / 4.0
    }

    /// Bending stiffness `EI` (N·m^2).
    pub fn bending_stiffness(&self) -> f64 {
        self.youngs_modulus * self.second_moment()
    }

    /// Ratio `A/(EI)` coupling magnetic energy per volume into curvature.
    pub fn coupling(&self) -> f64 {
        self.area() / self.bending_stiffness()
    }

    /// Slender-rod assumption: length at least five diameters.
    pub fn is_slender(&self) -> bool {
        self.length / (2.0 * self.radius) >= 5.0
    }

    pub fn validate(&self) -> Result<(), ElasticaError> {
        for (name, v) in [
            ("length", self.length),
            ("radius", self.radius),
            ("youngs_modulus", self.youngs_modulus),
            ("magnetization", self.magnetization),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ElasticaError::InvalidParams(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Actuation plane through the robot axis, rolled by `phi` about that axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    /// Roll angle of the plane about the base x axis (rad).
    pub phi: f64,
}

impl Plane {
    /// In-plane direction orthogonal to the body axis.
    pub fn o_hat(&self) -> Vector3<f64> {
        Vector3::new(0.0, self.phi.cos(), self.phi.sin())
    }

    /// Plane normal.
    pub fn n_hat(&self) -> Vector3<f64> {
        Vector3::new(0.0, self.phi.sin(), -self.phi.cos())
    }

    /// Rotation taking the zero-roll plane into this one.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (s, c) = self.phi.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }

    /// Magnet moment direction in the base frame for rotation angle `psi`.
    ///
    /// The magnet spin axis is the plane normal; at `psi = 0` the moment
    /// points along the negative body axis.
    pub fn moment_direction(&self, psi: f64) -> Vector3<f64> {
        let (s, c) = psi.sin_cos();
        Vector3::new(-c, 0.0, 0.0) + s * self.o_hat()
    }

    /// Derivative of [`Plane::moment_direction`] with respect to `psi`.
    pub fn moment_direction_dpsi(&self, psi: f64) -> Vector3<f64> {
        let (s, c) = psi.sin_cos();
        Vector3::new(s, 0.0, 0.0) + c * self.o_hat()
    }
}

impl Default for Plane {
    fn default() -> Self {
        Self { phi: 0.0 }
    }
}

/// One actuation input: magnet pose in the base frame plus its moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuation {
    /// Magnet centre position in the base frame (m); must lie on the plane.
    pub magnet_position: Vector3<f64>,
    /// Magnet rotation angle `psi` (rad).
    pub psi: f64,
    /// Magnet dipole moment magnitude `M_A` (A·m^2).
    pub moment: f64,
}

impl Actuation {
    pub fn validate(&self, plane: Plane) -> Result<(), ElasticaError> {
        if !(self.moment.is_finite() && self.moment >= 0.0) {
            return Err(ElasticaError::InvalidParams("moment must be non-negative".into()));
        }
        if !(self.psi.is_finite() && self.magnet_position.iter().all(|c| c.is_finite())) {
            return Err(ElasticaError::InvalidParams("actuation must be finite".into()));
        }
        let offset = self.magnet_position.dot(&plane.n_hat()).abs();
        if offset > 1e-9 {
            return Err(ElasticaError::MagnetOffPlane { offset });
        }
        Ok(())
    }
}

/// Discretisation and shooting controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Number of grid intervals along the body (at least 64).
    pub nodes: usize,
    /// Tip curvature residual tolerance (rad/m).
    pub tol: f64,
    /// Maximum number of initial value integrations per solve.
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { nodes: 128, tol: 1e-8, max_iters: 50 }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), ElasticaError> {
        if self.nodes < 64 {
            return Err(ElasticaError::InvalidParams("need at least 64 grid intervals".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(ElasticaError::InvalidParams("tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(ElasticaError::InvalidParams("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Converged body shape on a uniform arc-length grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    /// Grid nodes `s_i` (m), `0..=L`.
    pub s: Vec<f64>,
    /// Tangent angle at each node (rad).
    pub theta: Vec<f64>,
    /// Curvature at each node (rad/m).
    pub dtheta: Vec<f64>,
    /// Plane the shape lives in.
    pub plane: Plane,
    /// Number of initial value integrations the solve used.
    pub iterations: usize,
    /// Tip curvature residual at convergence (rad/m).
    pub residual: f64,
    cum_cos: Vec<f64>,
    cum_sin: Vec<f64>,
}

impl Shape {
    /// Tip deflection angle `theta(L)` (rad).
    pub fn tip_angle(&self) -> f64 {
        *self.theta.last().unwrap()
    }

    /// Base curvature `theta'(0)` the shooting solve converged to.
    pub fn initial_slope(&self) -> f64 {
        self.dtheta[0]
    }

    pub fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    fn grid_step(&self) -> f64 {
        self.s[1] - self.s[0]
    }

    /// Tangent angle at arc length `s`, linearly interpolated.
    pub fn theta_at(&self, s: f64) -> Result<f64, ElasticaError> {
        let (i, w) = self.locate(s)?;
        Ok(self.theta[i] * (1.0 - w) + self.theta[i + 1] * w)
    }

    fn locate(&self, s: f64) -> Result<(usize, f64), ElasticaError> {
        let l = self.length();
        if !(0.0..=l * (1.0 + 1e-12)).contains(&s) {
            return Err(ElasticaError::OutOfDomain { s });
        }
        let h = self.grid_step();
        let i = ((s / h) as usize).min(self.theta.len() - 2);
        let mut w = (s - self.s[i]) / h;
        // Snap queries that land on a node (up to rounding) so node values
        // are returned exactly.
        if w.abs() < 1e-9 {
            w = 0.0;
        } else if (1.0 - w).abs() < 1e-9 {
            w = 1.0;
        }
        Ok((i, w))
    }

    /// In-plane accumulated integrals of `(cos theta, sin theta)` up to `s`,
    /// by trapezoidal quadrature on the grid.
    pub fn planar_integrals(&self, s: f64) -> Result<(f64, f64), ElasticaError> {
        let (i, w) = self.locate(s)?;
        if w == 1.0 {
            return Ok((self.cum_cos[i + 1], self.cum_sin[i + 1]));
        }
        let h = self.grid_step();
        let th = self.theta[i] * (1.0 - w) + self.theta[i + 1] * w;
        let ds = w * h;
        let cx = self.cum_cos[i] + 0.5 * ds * (self.theta[i].cos() + th.cos());
        let sy = self.cum_sin[i] + 0.5 * ds * (self.theta[i].sin() + th.sin());
        Ok((cx, sy))
    }

    /// Material point position at arc length `s` in the base frame.
    pub fn body_point(&self, s: f64) -> Result<Vector3<f64>, ElasticaError> {
        let (cx, sy) = self.planar_integrals(s)?;
        Ok(self.plane.rotation() * Vector3::new(cx, sy, 0.0))
    }

    /// Free-end position in the base frame.
    pub fn tip_position(&self) -> Vector3<f64> {
        self.body_point(self.length()).expect("tip is on the body")
    }
}

/// Pointwise evaluation of the governing right-hand side and its derivatives.
///
/// All derivative bookkeeping treats the accumulated curve as co-rotating
/// with the local tangent about the base, which is exactly the kinematic
/// coupling the sensitivity equation linearises.
pub(crate) struct Kernel {
    coupling: f64,
    magnetization: f64,
    field_scale: f64,
    p_magnet: Vector3<f64>,
    m_hat: Vector3<f64>,
    dm_dpsi: Vector3<f64>,
    rot: Matrix3<f64>,
}

pub(crate) struct KernelOutput {
    /// Curvature rate `sigma` (rad/m^2).
    pub sigma: f64,
    /// Sensitivity of `sigma` to the local angle (rad/m^2 per rad).
    pub q: f64,
    /// Sensitivity of `sigma` to the magnet rotation (rad/m^2 per rad).
    pub r: f64,
}

impl Kernel {
    pub(crate) fn new(params: &RobotParams, act: &Actuation, plane: Plane) -> Self {
        Self {
            coupling: params.coupling(),
            magnetization: params.magnetization,
            field_scale: MU_0 * act.moment / (4.0 * PI),
            p_magnet: act.magnet_position,
            m_hat: plane.moment_direction(act.psi),
            dm_dpsi: plane.moment_direction_dpsi(act.psi),
            rot: plane.rotation(),
        }
    }

    /// Field and gradient at displacement `p` for a given moment direction.
    fn field_pair(&self, p: Vector3<f64>, m_hat: Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let d = p.norm();
        let p_hat = p / d;
        let cb = self.field_scale / (d * d * d);
        let cg = 3.0 * cb / d;
        let pm = p_hat.dot(&m_hat);
        let b = cb * (3.0 * pm * p_hat - m_hat);
        let outer = p_hat * m_hat.transpose();
        let grad = cg
            * (outer
                + outer.transpose()
                + pm * (Matrix3::identity() - 5.0 * p_hat * p_hat.transpose()));
        (b, grad)
    }

    fn geometry(
        &self,
        theta: f64,
        cx: f64,
        sy: f64,
    ) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (st, ct) = theta.sin_cos();
        let x = self.rot * Vector3::new(cx, sy, 0.0);
        let p = x - self.p_magnet;
        let rm = self.magnetization * (self.rot * Vector3::new(ct, st, 0.0));
        let drm = self.magnetization * (self.rot * Vector3::new(-st, ct, 0.0));
        let dxdt = self.rot * Vector3::new(-sy, cx, 0.0);
        (x, p, rm, drm, dxdt)
    }

    /// `sigma` alone, for the shape integration hot loop.
    pub(crate) fn sigma(&self, theta: f64, cx: f64, sy: f64) -> f64 {
        let (_, p, rm, drm, dxdt) = self.geometry(theta, cx, sy);
        let (b, grad) = self.field_pair(p, self.m_hat);
        -self.coupling * (drm.dot(&b) + (grad * rm).dot(&dxdt))
    }

    /// `sigma` with both sensitivities.
    pub(crate) fn full(&self, theta: f64, cx: f64, sy: f64) -> KernelOutput {
        let (x, p, rm, drm, dxdt) = self.geometry(theta, cx, sy);
        let (b, grad) = self.field_pair(p, self.m_hat);
        let sigma = -self.coupling * (drm.dot(&b) + (grad * rm).dot(&dxdt));
        let q = self.coupling
            * (rm.dot(&b) + (grad * rm).dot(&x) - 2.0 * (grad * drm).dot(&dxdt));
        // The field maps are linear in the moment direction, so the psi
        // sensitivity is sigma evaluated with the direction derivative.
        let (b_psi, grad_psi) = self.field_pair(p, self.dm_dpsi);
        let r = -self.coupling * (drm.dot(&b_psi) + (grad_psi * rm).dot(&dxdt));
        KernelOutput { sigma, q, r }
    }

    /// Row vector `w` such that `sigma = w . m_hat(psi)` at this state.
    pub(crate) fn sigma_row(&self, theta: f64, cx: f64, sy: f64) -> Vector3<f64> {
        let (_, p, rm, drm, dxdt) = self.geometry(theta, cx, sy);
        let mut row = Vector3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            let (b_k, grad_k) = self.field_pair(p, e);
            row[k] = -self.coupling * (drm.dot(&b_k) + (grad_k * rm).dot(&dxdt));
        }
        row
    }
}

/// Right-hand side `sigma(s, theta)` of the governing equation, evaluated on
/// a solved shape with the local angle overridden.
///
/// Overriding `theta` rigidly rotates the accumulated curve about the base by
/// the same amount, so central differences of this function in `theta`
/// reproduce the analytic sensitivity used by the Jacobian solver.
pub fn rhs_sigma(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    shape: &Shape,
    s: f64,
    theta: f64,
) -> Result<f64, ElasticaError> {
    let kernel = Kernel::new(params, act, plane);
    let (cx, sy) = shape.planar_integrals(s)?;
    let delta = theta - shape.theta_at(s)?;
    let (sd, cd) = delta.sin_cos();
    let (cx, sy) = (cx * cd - sy * sd, cx * sd + sy * cd);
    Ok(kernel.sigma(theta, cx, sy))
}

#[derive(Clone, Copy)]
struct IvpState {
    theta: f64,
    omega: f64,
    cx: f64,
    sy: f64,
}

fn rk4_step(kernel: &Kernel, st: IvpState, h: f64) -> IvpState {
    let f = |y: IvpState| {
        let (sin_t, cos_t) = y.theta.sin_cos();
        [y.omega, kernel.sigma(y.theta, y.cx, y.sy), cos_t, sin_t]
    };
    let add = |y: IvpState, k: [f64; 4], a: f64| IvpState {
        theta: y.theta + a * k[0],
        omega: y.omega + a * k[1],
        cx: y.cx + a * k[2],
        sy: y.sy + a * k[3],
    };
    let k1 = f(st);
    let k2 = f(add(st, k1, 0.5 * h));
    let k3 = f(add(st, k2, 0.5 * h));
    let k4 = f(add(st, k3, h));
    IvpState {
        theta: st.theta + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        omega: st.omega + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        cx: st.cx + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        sy: st.sy + h / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
    }
}

struct Trajectory {
    theta: Vec<f64>,
    omega: Vec<f64>,
    cum_cos: Vec<f64>,
    cum_sin: Vec<f64>,
}

fn integrate(kernel: &Kernel, omega0: f64, n: usize, h: f64) -> Trajectory {
    let mut st = IvpState { theta: 0.0, omega: omega0, cx: 0.0, sy: 0.0 };
    let mut tr = Trajectory {
        theta: Vec::with_capacity(n + 1),
        omega: Vec::with_capacity(n + 1),
        cum_cos: Vec::with_capacity(n + 1),
        cum_sin: Vec::with_capacity(n + 1),
    };
    let push = |st: &IvpState, tr: &mut Trajectory| {
        tr.theta.push(st.theta);
        tr.omega.push(st.omega);
        tr.cum_cos.push(st.cx);
        tr.cum_sin.push(st.sy);
    };
    push(&st, &mut tr);
    for _ in 0..n {
        st = rk4_step(kernel, st, h);
        push(&st, &mut tr);
    }
    tr
}

/// Values of one scalar observable at recent magnet rotations, used to
/// extrapolate a prediction for the next solve.
#[derive(Default)]
struct Continuation {
    points: Vec<(f64, f64)>,
}

impl Continuation {
    const MAX_STORED: usize = 8;
    /// Minimum rotation separation between points used for extrapolation;
    /// closer pairs amplify solver noise through the divided differences.
    const SEPARATION: f64 = 1e-3;

    fn clear(&mut self) {
        self.points.clear();
    }

    fn push(&mut self, psi: f64, value: f64) {
        self.points.push((psi, value));
        if self.points.len() > Self::MAX_STORED {
            self.points.remove(0);
        }
    }

    /// Polynomial extrapolation at `psi` through the most recent
    /// well-separated points (Neville's scheme), at most `order + 1` of them.
    fn predict(&self, psi: f64, order: usize) -> Option<f64> {
        let mut xs: Vec<f64> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        for &(p, w) in self.points.iter().rev() {
            if (p - psi).abs() > 1.0 {
                continue;
            }
            if xs.iter().all(|&x| (x - p).abs() >= Self::SEPARATION) {
                xs.push(p);
                vals.push(w);
                if xs.len() > order {
                    break;
                }
            }
        }
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        for j in 1..n {
            for i in 0..n - j {
                vals[i] = ((psi - xs[i + j]) * vals[i] + (xs[i] - psi) * vals[i + 1])
                    / (xs[i] - xs[i + j]);
            }
        }
        Some(vals[0])
    }
}

/// Shooting solver over one actuation plane.
///
/// Successive solves against the same magnet placement warm-start each other:
/// the converged base curvature and the shooting-residual slope are continued
/// polynomially in the magnet rotation, which drops most sweep solves to two
/// integrations.
pub struct BvpSolver {
    params: RobotParams,
    plane: Plane,
    settings: SolverSettings,
    omega_history: Continuation,
    slope_history: Continuation,
    /// Magnet placement the histories belong to.
    fingerprint: Option<(Vector3<f64>, f64)>,
    last_curve: Option<Vec<Vector3<f64>>>,
}

impl BvpSolver {
    pub fn new(
        params: RobotParams,
        plane: Plane,
        settings: SolverSettings,
    ) -> Result<Self, ElasticaError> {
        params.validate()?;
        settings.validate()?;
        Ok(Self {
            params,
            plane,
            settings,
            omega_history: Continuation::default(),
            slope_history: Continuation::default(),
            fingerprint: None,
            last_curve: None,
        })
    }

    pub fn params(&self) -> &RobotParams {
        &self.params
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// Drop the warm-start state, forcing the next solve to start cold.
    pub fn reset(&mut self) {
        self.omega_history.clear();
        self.slope_history.clear();
        self.fingerprint = None;
        self.last_curve = None;
    }

    fn clearance_check(&self, act: &Actuation) -> Result<(), ElasticaError> {
        let h = self.params.length / self.settings.nodes as f64;
        let straight: Vec<Vector3<f64>>;
        let curve = match &self.last_curve {
            Some(c) => c,
            None => {
                straight = (0..=self.settings.nodes)
                    .map(|i| Vector3::new(i as f64 * h, 0.0, 0.0))
                    .collect();
                &straight
            }
        };
        let min = curve
            .iter()
            .map(|x| (x - act.magnet_position).norm())
            .fold(f64::INFINITY, f64::min);
        if min <= h {
            return Err(ElasticaError::MagnetTooClose { distance: min, limit: h });
        }
        Ok(())
    }

    /// Solve the boundary value problem for one actuation input.
    pub fn solve(&mut self, act: &Actuation) -> Result<Shape, ElasticaError> {
        act.validate(self.plane)?;
        self.clearance_check(act)?;

        let fingerprint = (act.magnet_position, act.moment);
        if self.fingerprint != Some(fingerprint) {
            self.omega_history.clear();
            self.slope_history.clear();
            self.fingerprint = Some(fingerprint);
        }

        let n = self.settings.nodes;
        let h = self.params.length / n as f64;
        let kernel = Kernel::new(&self.params, act, self.plane);

        let mut iterations = 0usize;
        let shoot = |omega0: f64, iterations: &mut usize| {
            *iterations += 1;
            integrate(&kernel, omega0, n, h)
        };

        // A field-free rod keeps its base curvature at the tip, so the
        // residual slope starts near one until solves refine it.
        let mut w0 = self.omega_history.predict(act.psi, 3).unwrap_or(0.0);
        let mut slope = self.slope_history.predict(act.psi, 1).unwrap_or(1.0);
        let mut fresh_slope = false;
        let mut tr = shoot(w0, &mut iterations);
        let mut r0 = *tr.omega.last().unwrap();

        // Bracket endpoints with opposite residual signs, once seen.
        let mut neg: Option<f64> = None;
        let mut pos: Option<f64> = None;
        let note = |w: f64, r: f64, neg: &mut Option<f64>, pos: &mut Option<f64>| {
            if r < 0.0 {
                *neg = Some(w);
            } else {
                *pos = Some(w);
            }
        };
        note(w0, r0, &mut neg, &mut pos);

        while !(r0.abs() <= self.settings.tol) {
            if iterations >= self.settings.max_iters || !r0.is_finite() {
                return Err(ElasticaError::NonConvergence { residual: r0, iterations });
            }
            let step = -r0 / slope;
            let capped = step.clamp(-10.0 * (1.0 + w0.abs()), 10.0 * (1.0 + w0.abs()));
            let mut w1 = w0 + capped;
            if let (Some(a), Some(b)) = (neg, pos) {
                let (lo, hi) = (a.min(b), a.max(b));
                if w1 < lo || w1 > hi {
                    w1 = 0.5 * (lo + hi);
                }
            }
            let tr1 = shoot(w1, &mut iterations);
            let r1 = *tr1.omega.last().unwrap();
            note(w1, r1, &mut neg, &mut pos);
            let ds = (r1 - r0) / (w1 - w0);
            if ds.is_finite() && ds.abs() > 1e-12 {
                slope = ds;
                fresh_slope = true;
            }
            w0 = w1;
            r0 = r1;
            tr = tr1;
        }

        self.omega_history.push(act.psi, w0);
        if fresh_slope {
            self.slope_history.push(act.psi, slope);
        }
        let rot = self.plane.rotation();
        self.last_curve = Some(
            tr.cum_cos
                .iter()
                .zip(&tr.cum_sin)
                .map(|(&cx, &sy)| rot * Vector3::new(cx, sy, 0.0))
                .collect(),
        );

        let shape = Shape {
            s: (0..=n).map(|i| i as f64 * h).collect(),
            theta: tr.theta,
            dtheta: tr.omega,
            plane: self.plane,
            iterations,
            residual: r0,
            cum_cos: tr.cum_cos,
            cum_sin: tr.cum_sin,
        };

        // The converged curve may have swung closer to the magnet than the
        // pre-pass geometry; re-check before handing it out.
        let min = self
            .last_curve
            .as_ref()
            .unwrap()
            .iter()
            .map(|x| (x - act.magnet_position).norm())
            .fold(f64::INFINITY, f64::min);
        if min <= h {
            self.last_curve = None;
            return Err(ElasticaError::MagnetTooClose { distance: min, limit: h });
        }
        Ok(shape)
    }

}

/// Re-integrate a converged shape together with extra linear states.
///
/// `extra` receives `(state, q, r)` at every Runge-Kutta stage, where `q` and
/// `r` are the angle and magnet-rotation sensitivities of the right-hand
/// side, and must return the stage derivative of the caller's states. Used by
/// the Jacobian solver to integrate its sensitivity equations on exactly the
/// grid of the original solve.
pub(crate) fn reintegrate_augmented<const K: usize>(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    shape: &Shape,
    init: [f64; K],
    extra: impl Fn(&[f64; K], f64, f64) -> [f64; K],
) -> Vec<[f64; K]> {
    let n = shape.s.len() - 1;
    let h = shape.grid_step();
    let kernel = Kernel::new(params, act, plane);
    let mut base = IvpState {
        theta: 0.0,
        omega: shape.initial_slope(),
        cx: 0.0,
        sy: 0.0,
    };
    let mut aug = init;
    let mut out = Vec::with_capacity(n + 1);
    out.push(aug);
    for _ in 0..n {
        let f = |y: IvpState, a: &[f64; K]| {
            let (sin_t, cos_t) = y.theta.sin_cos();
            let ko = kernel.full(y.theta, y.cx, y.sy);
            ([y.omega, ko.sigma, cos_t, sin_t], extra(a, ko.q, ko.r))
        };
        let add = |y: IvpState, k: &[f64; 4], a: &[f64; K], ka: &[f64; K], w: f64| {
            let mut a2 = *a;
            for i in 0..K {
                a2[i] += w * ka[i];
            }
            (
                IvpState {
                    theta: y.theta + w * k[0],
                    omega: y.omega + w * k[1],
                    cx: y.cx + w * k[2],
                    sy: y.sy + w * k[3],
                },
                a2,
            )
        };
        let (k1, a1) = f(base, &aug);
        let (y2, b2) = add(base, &k1, &aug, &a1, 0.5 * h);
        let (k2, a2) = f(y2, &b2);
        let (y3, b3) = add(base, &k2, &aug, &a2, 0.5 * h);
        let (k3, a3) = f(y3, &b3);
        let (y4, b4) = add(base, &k3, &aug, &a3, h);
        let (k4, a4) = f(y4, &b4);
        base = IvpState {
            theta: base.theta + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            omega: base.omega + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            cx: base.cx + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
            sy: base.sy + h / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        };
        for i in 0..K {
            aug[i] += h / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
        }
        out.push(aug);
    }
    out
}

/// Right-hand-side value and sensitivities at every node of a solved shape.
pub(crate) fn kernel_outputs_on_shape(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    shape: &Shape,
) -> Vec<KernelOutput> {
    let kernel = Kernel::new(params, act, plane);
    (0..shape.s.len())
        .map(|i| kernel.full(shape.theta[i], shape.cum_cos[i], shape.cum_sin[i]))
        .collect()
}

/// One-shot cold solve.
pub fn solve_bvp(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    settings: &SolverSettings,
) -> Result<Shape, ElasticaError> {
    BvpSolver::new(*params, plane, *settings)?.solve(act)
}

/// Tip angle expressed as an explicit sinusoid of the magnet rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidDecomposition {
    /// Coefficient of `-cos psi` in the tip angle (rad).
    pub theta_bar_1: f64,
    /// Coefficient of `sin psi` in the tip angle (rad).
    pub theta_bar_2: f64,
    /// Signed amplitude (rad); `theta_L = amplitude * sin(psi - phase)`.
    pub amplitude: f64,
    /// Phase offset (rad), in `(-pi/2, pi/2]`.
    pub phase: f64,
}

/// Decompose the tip angle of a converged shape into its sinusoidal
/// dependence on the magnet rotation angle.
///
/// The right-hand side is linear in the moment direction, so `sigma(s) =
/// w(s) . m_hat(psi)`; integrating the governing equation twice against the
/// clamped-base free-tip boundary conditions collapses the double integral to
/// a single quadrature with weight `-s`, giving a coefficient row vector with
/// `theta_L = row . m_hat(psi)` exactly on the solved shape.
pub fn sinusoid_decomposition(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
    shape: &Shape,
) -> SinusoidDecomposition {
    let kernel = Kernel::new(params, act, plane);
    let n = shape.s.len() - 1;
    let h = shape.grid_step();
    // Composite Simpson over the node rows; the grid has an even interval
    // count by construction (validated >= 64, doubled parity enforced below).
    let rows: Vec<Vector3<f64>> = (0..=n)
        .map(|i| {
            let row = kernel.sigma_row(shape.theta[i], shape.cum_cos[i], shape.cum_sin[i]);
            -shape.s[i] * row
        })
        .collect();
    let mut acc = Vector3::zeros();
    if n % 2 == 0 {
        for i in (0..n).step_by(2) {
            acc += h / 3.0 * (rows[i] + 4.0 * rows[i + 1] + rows[i + 2]);
        }
    } else {
        for i in 0..n {
            acc += 0.5 * h * (rows[i] + rows[i + 1]);
        }
    }
    let t1 = acc.x;
    let t2 = acc.dot(&plane.o_hat());
    let (amplitude, phase) = if t1 == 0.0 && t2 == 0.0 {
        (0.0, 0.0)
    } else if t2 == 0.0 {
        (t1.abs(), PI / 2.0 * t1.signum())
    } else {
        (t2.signum() * (t1 * t1 + t2 * t2).sqrt(), (t1 / t2).atan())
    };
    SinusoidDecomposition { theta_bar_1: t1, theta_bar_2: t2, amplitude, phase }
}

/// Tip angle predicted by a decomposition at magnet rotation `psi`.
pub fn decomposition_tip_angle(dec: &SinusoidDecomposition, psi: f64) -> f64 {
    -dec.theta_bar_1 * psi.cos() + dec.theta_bar_2 * psi.sin()
}

/// One point of a workspace sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub psi: f64,
    pub tip_angle: f64,
    pub iterations: usize,
}

/// Extremum of the tip angle over the magnet rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    pub psi: f64,
    pub tip_angle: f64,
}

/// Result of sweeping the magnet rotation over at least one period.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub maximum: Extremum,
    pub minimum: Extremum,
    pub mean_iterations: f64,
}

impl SweepResult {
    /// Reachable tip-angle interval width (rad).
    pub fn workspace_width(&self) -> f64 {
        self.maximum.tip_angle - self.minimum.tip_angle
    }
}

/// Sweep controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub psi_start: f64,
    pub psi_end: f64,
    /// Number of grid points, endpoints included.
    pub points: usize,
    /// Termination window for the extremum refinement (rad).
    pub refine_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { psi_start: -PI, psi_end: PI, points: 101, refine_tol: 1e-6 }
    }
}

/// Solve the boundary value problem across a grid of magnet rotations and
/// refine both tip-angle extremums by golden-section search.
///
/// Solves run in grid order so each one warm-starts from its neighbour.
pub fn workspace_sweep(
    solver: &mut BvpSolver,
    act: &Actuation,
    config: &SweepConfig,
) -> Result<SweepResult, ElasticaError> {
    if config.points < 8 {
        return Err(ElasticaError::InvalidParams("sweep needs at least 8 points".into()));
    }
    let span = config.psi_end - config.psi_start;
    if span < 2.0 * PI * (1.0 - 1e-9) {
        return Err(ElasticaError::InvalidParams(
            "sweep must cover at least one full rotation".into(),
        ));
    }
    let mut points = Vec::with_capacity(config.points);
    for i in 0..config.points {
        let psi =
            config.psi_start + span * i as f64 / (config.points - 1) as f64;
        let shape = solver.solve(&Actuation { psi, ..*act })?;
        points.push(SweepPoint { psi, tip_angle: shape.tip_angle(), iterations: shape.iterations });
    }
    let mean_iterations =
        points.iter().map(|p| p.iterations as f64).sum::<f64>() / points.len() as f64;

    let tip_at = |solver: &mut BvpSolver, psi: f64| -> Result<f64, ElasticaError> {
        Ok(solver.solve(&Actuation { psi, ..*act })?.tip_angle())
    };
    let h = span / (config.points - 1) as f64;
    let refine = |solver: &mut BvpSolver, idx: usize, sign: f64| -> Result<Extremum, ElasticaError> {
        let centre = points[idx].psi;
        let (mut lo, mut hi) = (centre - h, centre + h);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - inv_phi * (hi - lo);
        let mut b = lo + inv_phi * (hi - lo);
        let mut fa = sign * tip_at(solver, a)?;
        let mut fb = sign * tip_at(solver, b)?;
        while hi - lo > config.refine_tol {
            if fa >= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - inv_phi * (hi - lo);
                fa = sign * tip_at(solver, a)?;
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + inv_phi * (hi - lo);
                fb = sign * tip_at(solver, b)?;
            }
        }
        let psi = 0.5 * (lo + hi);
        Ok(Extremum { psi, tip_angle: tip_at(solver, psi)? })
    };

    // Endpoints describe the same physical rotation, so extremums sitting on
    // the seam are refined through their interior copy.
    let interior = |i: usize| i.clamp(1, points.len() - 2);
    let i_max = points
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.tip_angle.total_cmp(&y.1.tip_angle))
        .map(|(i, _)| interior(i))
        .unwrap();
    let i_min = points
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.tip_angle.total_cmp(&y.1.tip_angle))
        .map(|(i, _)| interior(i))
        .unwrap();
    let maximum = refine(solver, i_max, 1.0)?;
    let minimum = refine(solver, i_min, -1.0)?;
    Ok(SweepResult { points, maximum, minimum, mean_iterations })
}

/// Actuation feasibility against the buckling bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    /// Distance beyond which the field envelope stays under the critical
    /// buckling field (m).
    pub distance_threshold: f64,
    /// Critical buckling flux density `EI pi^2 / (4 M A L^2)` (T).
    pub critical_field: f64,
    /// Closest approach between the magnet and the undeformed body (m).
    pub min_distance: f64,
    pub feasible: bool,
}

/// Distance threshold `(mu0 M_A M A L^2 / (pi E I))^(1/3)`.
///
/// This is where the conservative distance-only field envelope
/// `pi mu0 M_A / (4 d^3)` meets the critical buckling field, so beyond it the
/// small-slope regime holds for every magnet orientation.
pub fn feasible_distance_threshold(params: &RobotParams, moment: f64) -> f64 {
    let ei = params.bending_stiffness();
    let num = MU_0 * moment * params.magnetization * params.area() * params.length.powi(2);
    (num / (PI * ei)).cbrt()
}

/// Critical buckling flux density for a straight rod.
pub fn critical_field(params: &RobotParams) -> f64 {
    params.bending_stiffness() * PI * PI
        / (4.0 * params.magnetization * params.area() * params.length.powi(2))
}

/// Check a magnet placement against the feasibility threshold.
pub fn feasibility_check(
    params: &RobotParams,
    act: &Actuation,
    plane: Plane,
) -> Result<FeasibilityReport, ElasticaError> {
    params.validate()?;
    act.validate(plane)?;
    let threshold = feasible_distance_threshold(params, act.moment);
    // Closest approach of the magnet to the undeformed axis segment.
    let p = act.magnet_position;
    let t = p.x.clamp(0.0, params.length);
    let min_distance = (p - Vector3::new(t, 0.0, 0.0)).norm();
    Ok(FeasibilityReport {
        distance_threshold: threshold,
        critical_field: critical_field(params),
        min_distance,
        feasible: min_distance > threshold,
    })
}
