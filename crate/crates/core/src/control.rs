//! Closed-loop quasi-static deflection control.
//!
//! A tracking differentiator shapes the reference, a linear extended state
//! observer (LESO) estimates the lumped disturbance acting on the tip angle,
//! and the quasi-static control law inverts the nominal tip sensitivity to
//! command the magnet rotation rate. [`simulate_closed_loop`] closes the loop
//! around the elastica boundary-value solver and records a dense trace.

use crate::elastica::{
    feasibility_check, Actuation, BvpSolver, ElasticaError, Plane, RobotParams, SolverSettings,
};
use crate::jacobian::{analytic_jacobian, damped_jacobian, JacobianError};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid control parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "nominal tip sensitivity is zero; the plain quasi-static law is singular \
         (use the damped variant)"
    )]
    SingularJacobian,
    #[error("empty simulation trace")]
    EmptyTrace,
    #[error("plant solve failed at t = {time} s")]
    PlantFailure {
        time: f64,
        #[source]
        source: ElasticaError,
        partial: Box<SimTrace>,
    },
    #[error("quasi-static law hit a zero sensitivity at t = {time} s (use the damped variant)")]
    SingularAt { time: f64, partial: Box<SimTrace> },
    #[error(transparent)]
    Elastica(#[from] ElasticaError),
    #[error(transparent)]
    Jacobian(#[from] JacobianError),
}

/// Linear extended state observer state and gains.
///
/// `x1_hat` tracks the measured tip angle and `x2_hat` the lumped
/// disturbance rate (everything the nominal first-order model leaves out).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesoState {
    /// Output estimate (rad).
    pub x1_hat: f64,
    /// Total-disturbance estimate (rad/s).
    pub x2_hat: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Observer time-scale parameter (s).
    pub epsilon: f64,
}

impl LesoState {
    pub fn new(x1_hat: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self, ControlError> {
        if !(beta1 > 0.0 && beta2 > 0.0 && epsilon > 0.0) {
            return Err(ControlError::InvalidParameter(
                "observer gains and epsilon must be positive".into(),
            ));
        }
        Ok(Self { x1_hat, x2_hat: 0.0, beta1, beta2, epsilon })
    }

    /// Gains used throughout the control experiments.
    pub fn with_reference_gains(x1_hat: f64) -> Self {
        Self { x1_hat, x2_hat: 0.0, beta1: 1.0, beta2: 0.01, epsilon: 0.01 }
    }
}

/// One explicit-Euler step of the observer
/// `x1' = x2 + (beta1/eps)(y - x1) + J u`, `x2' = (beta2/eps^2)(y - x1)`.
pub fn leso_step(state: &LesoState, y: f64, u: f64, j_nominal: f64, dt: f64) -> LesoState {
    let innovation = y - state.x1_hat;
    let x1_dot = state.x2_hat + state.beta1 / state.epsilon * innovation + j_nominal * u;
    let x2_dot = state.beta2 / (state.epsilon * state.epsilon) * innovation;
    LesoState { x1_hat: state.x1_hat + dt * x1_dot, x2_hat: state.x2_hat + dt * x2_dot, ..*state }
}

/// Tracking-differentiator state: smoothed reference and its rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdState {
    /// Smoothed reference (rad).
    pub tracked: f64,
    /// Smoothed reference rate (rad/s).
    pub rate: f64,
    pub k1: f64,
    pub k2: f64,
    /// Speed parameter scaling the transient (1/s).
    pub speed: f64,
}

impl TdState {
    pub fn new(tracked: f64, k1: f64, k2: f64, speed: f64) -> Result<Self, ControlError> {
        if !(k1 > 0.0 && k2 > 0.0 && speed > 0.0) {
            return Err(ControlError::InvalidParameter(
                "differentiator gains must be positive".into(),
            ));
        }
        Ok(Self { tracked, rate: 0.0, k1, k2, speed })
    }

    /// Gains used throughout the control experiments.
    pub fn with_reference_gains(tracked: f64) -> Self {
        Self { tracked, rate: 0.0, k1: 0.1, k2: 1.0, speed: 10.0 }
    }
}

/// One explicit-Euler step of the second-order tracker
/// `tracked'' = -k1 R^2 (tracked - y_r) - k2 R tracked'`.
pub fn td_step(state: &TdState, y_r: f64, dt: f64) -> TdState {
    let accel = -state.k1 * state.speed * state.speed * (state.tracked - y_r)
        - state.k2 * state.speed * state.rate;
    TdState {
        tracked: state.tracked + dt * state.rate,
        rate: state.rate + dt * accel,
        ..*state
    }
}

/// Nominal rate command `u0 = rate + k (tracked - x1_hat)`.
pub fn control_pd(td: &TdState, x1_hat: f64, k: f64) -> f64 {
    td.rate + k * (td.tracked - x1_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerVariant {
    /// Rate command applied directly to the actuator, no model inversion.
    Pd,
    /// Quasi-static law `u = (u0 - x2_hat) / J`.
    Qsc,
    /// Quasi-static law with the sensitivity floored away from zero.
    DampedQsc,
}

/// Disturbance-cancelling actuator rate for the selected variant.
pub fn control_qsc(
    u0: f64,
    x2_hat: f64,
    j_nominal: f64,
    variant: ControllerVariant,
    lambda: f64,
) -> Result<f64, ControlError> {
    match variant {
        ControllerVariant::Pd => Ok(u0),
        ControllerVariant::Qsc => {
            if j_nominal == 0.0 {
                Err(ControlError::SingularJacobian)
            } else {
                Ok((u0 - x2_hat) / j_nominal)
            }
        }
        ControllerVariant::DampedQsc => {
            if lambda <= 0.0 {
                return Err(ControlError::InvalidParameter(
                    "damping floor must be positive".into(),
                ));
            }
            Ok((u0 - x2_hat) / damped_jacobian(j_nominal, lambda))
        }
    }
}

/// Controller gains, actuator limits, and variant selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub variant: ControllerVariant,
    /// Proportional gain on the smoothed reference error (1/s).
    pub k: f64,
    /// Sensitivity floor for the damped variant (rad/rad).
    pub lambda: f64,
    /// Actuator joint limits (rad).
    pub psi_min: f64,
    pub psi_max: f64,
    /// Actuator speed limit (rad/s), if any.
    pub rate_limit: Option<f64>,
    pub leso_beta1: f64,
    pub leso_beta2: f64,
    pub leso_epsilon: f64,
    pub td_k1: f64,
    pub td_k2: f64,
    pub td_speed: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            variant: ControllerVariant::Qsc,
            k: 1.02,
            lambda: 0.05,
            psi_min: -3.0 * PI / 4.0,
            psi_max: 3.0 * PI / 4.0,
            rate_limit: None,
            leso_beta1: 1.0,
            leso_beta2: 0.01,
            leso_epsilon: 0.01,
            td_k1: 0.1,
            td_k2: 1.0,
            td_speed: 10.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [
            ("k", self.k),
            ("lambda", self.lambda),
            ("leso_beta1", self.leso_beta1),
            ("leso_beta2", self.leso_beta2),
            ("leso_epsilon", self.leso_epsilon),
            ("td_k1", self.td_k1),
            ("td_k2", self.td_k2),
            ("td_speed", self.td_speed),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ControlError::InvalidParameter(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if !(self.psi_min.is_finite() && self.psi_max.is_finite() && self.psi_min < self.psi_max)
        {
            return Err(ControlError::InvalidParameter(
                "joint limits must satisfy psi_min < psi_max".into(),
            ));
        }
        if let Some(rate) = self.rate_limit {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(ControlError::InvalidParameter(
                    "rate limit must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Reference trajectory for the tip angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceSignal {
    Step { amplitude: f64 },
    Cosine { amplitude: f64, period: f64 },
}

impl ReferenceSignal {
    pub fn validate(&self) -> Result<(), ControlError> {
        match *self {
            ReferenceSignal::Step { amplitude } => {
                if !amplitude.is_finite() {
                    return Err(ControlError::InvalidParameter(
                        "step amplitude must be finite".into(),
                    ));
                }
            }
            ReferenceSignal::Cosine { amplitude, period } => {
                if !amplitude.is_finite() {
                    return Err(ControlError::InvalidParameter(
                        "cosine amplitude must be finite".into(),
                    ));
                }
                if !(period.is_finite() && period > 0.0) {
                    return Err(ControlError::InvalidParameter(
                        "cosine period must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ReferenceSignal::Step { amplitude } => amplitude,
            ReferenceSignal::Cosine { amplitude, period } => {
                amplitude * (2.0 * PI * t / period).cos()
            }
        }
    }
}

/// Additive output disturbance injected after the plant evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Disturbance {
    None,
    Step {
        magnitude: f64,
        start: f64,
    },
    /// Band-limited Gaussian noise: white samples through a one-pole filter
    /// with the given cutoff, scaled to the stationary standard deviation
    /// `magnitude`.
    Noise {
        magnitude: f64,
        start: f64,
        cutoff_hz: f64,
    },
}

impl Disturbance {
    pub fn validate(&self) -> Result<(), ControlError> {
        match *self {
            Disturbance::None => Ok(()),
            Disturbance::Step { magnitude, start } => {
                if !(magnitude.is_finite() && start.is_finite() && start >= 0.0) {
                    return Err(ControlError::InvalidParameter(
                        "step disturbance needs finite magnitude and start >= 0".into(),
                    ));
                }
                Ok(())
            }
            Disturbance::Noise { magnitude, start, cutoff_hz } => {
                if !(magnitude.is_finite()
                    && magnitude >= 0.0
                    && start.is_finite()
                    && start >= 0.0
                    && cutoff_hz > 0.0)
                {
                    return Err(ControlError::InvalidParameter(
                        "noise disturbance needs magnitude >= 0, start >= 0, cutoff > 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Source of the nominal tip sensitivity consumed by the observer and law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    /// Pre-computed over a uniform rotation grid, linearly interpolated.
    Table { points: usize },
    /// Recomputed from the current converged shape every step.
    Exact,
}

impl Default for JacobianMode {
    fn default() -> Self {
        JacobianMode::Table { points: 181 }
    }
}

/// Tip sensitivity tabulated over one rotation period.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianTable {
    psis: Vec<f64>,
    values: Vec<f64>,
}

impl JacobianTable {
    /// Tabulate the analytical tip sensitivity over `[-pi, pi]`.
    pub fn build(
        solver: &mut BvpSolver,
        act: &Actuation,
        points: usize,
    ) -> Result<Self, ControlError> {
        if points < 8 {
            return Err(ControlError::InvalidParameter(
                "sensitivity table needs at least 8 points".into(),
            ));
        }
        let params = *solver.params();
        let plane = solver.plane();
        let mut psis = Vec::with_capacity(points);
        let mut values = Vec::with_capacity(points);
        for i in 0..points {
            let psi = -PI + 2.0 * PI * i as f64 / (points - 1) as f64;
            let probe = Actuation { psi, ..*act };
            let shape = solver.solve(&probe)?;
            values.push(analytic_jacobian(&params, &probe, plane, &shape)?.tip());
            psis.push(psi);
        }
        Ok(Self { psis, values })
    }

    /// Linear interpolation, clamped to the tabulated range.
    pub fn value(&self, psi: f64) -> f64 {
        let n = self.psis.len();
        if psi <= self.psis[0] {
            return self.values[0];
        }
        if psi >= self.psis[n - 1] {
            return self.values[n - 1];
        }
        let step = (self.psis[n - 1] - self.psis[0]) / (n - 1) as f64;
        let cell = (((psi - self.psis[0]) / step) as usize).min(n - 2);
        let w = (psi - self.psis[cell]) / step;
        self.values[cell] * (1.0 - w) + self.values[cell + 1] * w
    }
}

/// Plant, actuator geometry, and sensitivity source for one simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSetup {
    pub params: RobotParams,
    pub plane: Plane,
    /// Fixed magnet centre in the base frame (m).
    pub magnet_position: Vector3<f64>,
    /// Magnet dipole moment magnitude (A·m^2).
    pub moment: f64,
    /// Initial rotation angle (rad).
    pub psi0: f64,
    pub settings: SolverSettings,
    pub jacobian_mode: JacobianMode,
}

/// Time grid, seeding, and measurement-noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Step size (s); the quasi-static loop requires dt <= 0.02 s.
    pub dt: f64,
    /// Total simulated time (s).
    pub duration: f64,
    pub seed: u64,
    /// Standard deviation of additive measurement noise (rad).
    pub measurement_noise: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.dt > 0.0 && self.dt <= 0.02) {
            return Err(ControlError::InvalidParameter(format!(
                "dt must lie in (0, 0.02] s, got {}",
                self.dt
            )));
        }
        if !(self.duration.is_finite() && self.duration >= self.dt) {
            return Err(ControlError::InvalidParameter(
                "duration must cover at least one step".into(),
            ));
        }
        if !(self.measurement_noise.is_finite() && self.measurement_noise >= 0.0) {
            return Err(ControlError::InvalidParameter(
                "measurement noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 0.01, duration: 10.0, seed: 0, measurement_noise: 0.0 }
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub y_r: f64,
    pub y_r_tracked: f64,
    pub theta_l: f64,
    pub x1_hat: f64,
    pub x2_hat: f64,
    pub u: f64,
    pub psi: f64,
}

/// Dense closed-loop record on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub rows: Vec<TraceRow>,
    pub dt: f64,
    /// True when the joint-limit clamp engaged at least once.
    pub limit_hit: bool,
}

impl SimTrace {
    pub fn csv(&self) -> String {
        let mut out = String::from("t,y_r,y_r_tracked,theta_L,x1_hat,x2_hat,u,psi\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t, r.y_r, r.y_r_tracked, r.theta_l, r.x1_hat, r.x2_hat, r.u, r.psi
            ));
        }
        out
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

struct DisturbanceState {
    spec: Disturbance,
    filtered: f64,
}

impl DisturbanceState {
    fn sample(&mut self, t: f64, dt: f64, rng: &mut ChaCha8Rng) -> f64 {
        match self.spec {
            Disturbance::None => 0.0,
            Disturbance::Step { magnitude, start } => {
                if t >= start {
                    magnitude
                } else {
                    0.0
                }
            }
            Disturbance::Noise { magnitude, start, cutoff_hz } => {
                if t < start || magnitude == 0.0 {
                    return 0.0;
                }
                let a = (-2.0 * PI * cutoff_hz * dt).exp();
                let drive = magnitude * (1.0 - a * a).sqrt();
                self.filtered = a * self.filtered + drive * gauss(rng);
                self.filtered
            }
        }
    }
}

/// Run the discrete quasi-static loop: measure, track, observe, invert,
/// integrate the rotation with joint-limit clamping, and re-solve the plant
/// warm-started.
pub fn simulate_closed_loop(
    setup: &SimSetup,
    controller: &ControllerConfig,
    reference: &ReferenceSignal,
    disturbance: &Disturbance,
    sim: &SimConfig,
) -> Result<SimTrace, ControlError> {
    controller.validate()?;
    reference.validate()?;
    disturbance.validate()?;
    sim.validate()?;
    let act0 = Actuation {
        magnet_position: setup.magnet_position,
        psi: setup.psi0,
        moment: setup.moment,
    };
    let report = feasibility_check(&setup.params, &act0, setup.plane)?;
    if !report.feasible {
        return Err(ControlError::InvalidParameter(format!(
            "magnet at distance {:.4} m sits inside the feasibility threshold {:.4} m",
            report.min_distance, report.distance_threshold
        )));
    }

    let mut solver = BvpSolver::new(setup.params, setup.plane, setup.settings)?;
    let table = match setup.jacobian_mode {
        JacobianMode::Table { points } => Some(JacobianTable::build(&mut solver, &act0, points)?),
        JacobianMode::Exact => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut dist = DisturbanceState { spec: *disturbance, filtered: 0.0 };
    let n = (sim.duration / sim.dt).round().max(1.0) as usize;
    let mut rows = Vec::with_capacity(n);
    let mut limit_hit = false;
    let mut psi = setup.psi0.clamp(controller.psi_min, controller.psi_max);
    let mut u_prev = 0.0;

    let initial_shape = solver.solve(&Actuation { psi, ..act0 })?;
    let y0 = initial_shape.tip_angle();
    let mut leso = LesoState {
        x1_hat: y0,
        x2_hat: 0.0,
        beta1: controller.leso_beta1,
        beta2: controller.leso_beta2,
        epsilon: controller.leso_epsilon,
    };
    let mut td = TdState {
        tracked: y0,
        rate: 0.0,
        k1: controller.td_k1,
        k2: controller.td_k2,
        speed: controller.td_speed,
    };

    let trace_so_far = |rows: &Vec<TraceRow>, limit_hit: bool| SimTrace {
        rows: rows.clone(),
        dt: sim.dt,
        limit_hit,
    };

    for k in 0..n {
        let t = k as f64 * sim.dt;
        let act = Actuation { psi, ..act0 };
        let shape = match solver.solve(&act) {
            Ok(shape) => shape,
            Err(source) => {
                return Err(ControlError::PlantFailure {
                    time: t,
                    source,
                    partial: Box::new(trace_so_far(&rows, limit_hit)),
                });
            }
        };
        let theta_l = shape.tip_angle() + dist.sample(t, sim.dt, &mut rng);
        let mut y = theta_l;
        if sim.measurement_noise > 0.0 {
            y += sim.measurement_noise * gauss(&mut rng);
        }

        let y_r = reference.value(t);
        td = td_step(&td, y_r, sim.dt);

        let j_bar = match &table {
            Some(table) => table.value(psi),
            None => {
                let profile = analytic_jacobian(&setup.params, &act, setup.plane, &shape)?;
                profile.tip()
            }
        };
        leso = leso_step(&leso, y, u_prev, j_bar, sim.dt);

        let u0 = control_pd(&td, leso.x1_hat, controller.k);
        let u_raw =
            match control_qsc(u0, leso.x2_hat, j_bar, controller.variant, controller.lambda) {
                Ok(u) => u,
                Err(ControlError::SingularJacobian) => {
                    return Err(ControlError::SingularAt {
                        time: t,
                        partial: Box::new(trace_so_far(&rows, limit_hit)),
                    });
                }
                Err(e) => return Err(e),
            };
        let u = match controller.rate_limit {
            Some(rate) => u_raw.clamp(-rate, rate),
            None => u_raw,
        };

        rows.push(TraceRow {
            t,
            y_r,
            y_r_tracked: td.tracked,
            theta_l,
            x1_hat: leso.x1_hat,
            x2_hat: leso.x2_hat,
            u,
            psi,
        });

        let next = psi + u * sim.dt;
        let clamped = next.clamp(controller.psi_min, controller.psi_max);
        if clamped != next {
            limit_hit = true;
        }
        psi = clamped;
        u_prev = u;
    }

    Ok(SimTrace { rows, dt: sim.dt, limit_hit })
}

/// Summary statistics of one closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceMetrics {
    /// Peak excursion beyond the final reference after the first crossing,
    /// as a percentage of the reference step size.
    pub overshoot_pct: f64,
    /// Mean absolute error over the final fifth of the run (rad).
    pub steady_state_error: f64,
    /// Root-mean-square error over the whole run (rad).
    pub rmse: f64,
    /// Integral of u^2 dt ((rad/s)^2 · s).
    pub control_energy: f64,
    /// Strict sign changes of consecutive rate commands.
    pub sign_flips: usize,
}

pub fn trace_metrics(trace: &SimTrace) -> Result<TraceMetrics, ControlError> {
    if trace.rows.is_empty() {
        return Err(ControlError::EmptyTrace);
    }
    let n = trace.rows.len();
    let y_final = trace.rows[n - 1].y_r;
    let y_start = trace.rows[0].theta_l;
    let step = y_final - y_start;

    let mut overshoot = 0.0;
    if step != 0.0 {
        let dir = step.signum();
        if let Some(first) =
            trace.rows.iter().position(|r| (r.theta_l - y_final) * dir >= 0.0)
        {
            for r in &trace.rows[first..] {
                let beyond = (r.theta_l - y_final) * dir;
                if beyond > overshoot {
                    overshoot = beyond;
                }
            }
            overshoot = overshoot / step.abs() * 100.0;
        }
    }

    let tail_start = (4 * n) / 5;
    let tail = &trace.rows[tail_start..];
    let steady_state_error =
        tail.iter().map(|r| (r.y_r - r.theta_l).abs()).sum::<f64>() / tail.len() as f64;
    let rmse = (trace.rows.iter().map(|r| (r.y_r - r.theta_l).powi(2)).sum::<f64>()
        / n as f64)
        .sqrt();
    let control_energy = trace.rows.iter().map(|r| r.u * r.u * trace.dt).sum::<f64>();
    let sign_flips = trace
        .rows
        .windows(2)
        .filter(|pair| pair[0].u * pair[1].u < 0.0)
        .count();

    Ok(TraceMetrics { overshoot_pct: overshoot, steady_state_error, rmse, control_energy, sign_flips })
}

/// Largest number of rate-command sign changes inside any window of the
/// given duration.
pub fn max_sign_flips_in_window(trace: &SimTrace, window: f64) -> usize {
    let n = trace.rows.len();
    if n < 2 {
        return 0;
    }
    // Flip between rows k and k+1 is stamped at t[k+1].
    let flips: Vec<f64> = trace
        .rows
        .windows(2)
        .filter(|pair| pair[0].u * pair[1].u < 0.0)
        .map(|pair| pair[1].t)
        .collect();
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..flips.len() {
        while flips[hi] - flips[lo] > window {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    const M_A: f64 = 342.86;

    fn test_setup(mode: JacobianMode) -> SimSetup {
        SimSetup {
            params: RobotParams::mscr1(),
            plane: Plane::default(),
            magnet_position: Vector3::new(0.024, 0.18, 0.0),
            moment: M_A,
            psi0: 0.0,
            settings: SolverSettings::default(),
            jacobian_mode: mode,
        }
    }

    #[test]
    fn leso_zero_innovation_zero_input_is_fixed_point() {
        let state = LesoState { x1_hat: 0.3, x2_hat: 0.0, beta1: 1.0, beta2: 0.01, epsilon: 0.01 };
        let next = leso_step(&state, 0.3, 0.0, 0.7, 0.01);
        assert_eq!(state, next);
    }

    #[test]
    fn leso_estimates_constant_disturbance_rate_within_five_seconds() {
        let mut state = LesoState::with_reference_gains(0.0);
        let dt = 0.01;
        let rate = 0.1;
        let mut converged_at = None;
        for k in 0..2000 {
            let t = k as f64 * dt;
            state = leso_step(&state, rate * t, 0.0, 1.0, dt);
            if converged_at.is_none() && (state.x2_hat - rate).abs() < 0.01 * rate {
                converged_at = Some(t);
            }
        }
        assert_abs_diff_eq!(state.x2_hat, rate, epsilon = 0.01 * rate);
        let t = converged_at.expect("estimate never reached 1%");
        assert!(t < 5.0, "1% convergence took {t} s");
    }

    #[test]
    fn leso_discrete_transition_is_stable_at_reference_gains() {
        let (beta1, beta2, epsilon, dt) = (1.0f64, 0.01f64, 0.01f64, 0.01f64);
        let a11 = 1.0 - dt * beta1 / epsilon;
        let a12 = dt;
        let a21 = -dt * beta2 / (epsilon * epsilon);
        let a22 = 1.0;
        let tr = a11 + a22;
        let det = a11 * a22 - a12 * a21;
        let disc = tr * tr - 4.0 * det;
        let radius = if disc >= 0.0 {
            let root = disc.sqrt();
            ((tr + root) / 2.0).abs().max(((tr - root) / 2.0).abs())
        } else {
            det.sqrt()
        };
        assert!(radius < 1.0, "spectral radius {radius}");
    }

    #[test]
    fn td_constant_reference_is_equilibrium_and_attractor() {
        let settled = TdState::with_reference_gains(0.4);
        let next = td_step(&settled, 0.4, 0.01);
        assert_eq!(settled, next);

        let mut state = TdState::with_reference_gains(0.0);
        for _ in 0..800 {
            state = td_step(&state, 0.4, 0.01);
        }
        assert_abs_diff_eq!(state.tracked, 0.4, epsilon = 1e-3);
        assert_abs_diff_eq!(state.rate, 0.0, epsilon = 1e-3);
    }

    #[test]
    fn td_ramp_tracking_rate_and_lag() {
        let a = 0.2;
        let dt = 0.01;
        let mut state = TdState::with_reference_gains(0.0);
        let mut t = 0.0;
        for _ in 0..1200 {
            state = td_step(&state, a * t, dt);
            t += dt;
        }
        assert_relative_eq!(state.rate, a, max_relative = 0.02);
        // Steady lag of the second-order tracker: -k2 a / (k1 R).
        let expected_lag = -state.k2 * a / (state.k1 * state.speed);
        assert_relative_eq!(state.tracked - a * t, expected_lag, max_relative = 0.05);
    }

    #[test]
    fn td_phase_lag_shrinks_with_speed_parameter() {
        let period = 4.0;
        let dt = 0.001;
        let lag_for = |speed: f64| {
            let mut state = TdState { speed, ..TdState::with_reference_gains(1.0) };
            let mut crossing = 0.0;
            let mut prev = state.tracked;
            let mut t = 0.0;
            for _ in 0..(12.0 / dt) as usize {
                let y_r = (2.0 * PI * t / period).cos();
                state = td_step(&state, y_r, dt);
                t += dt;
                if prev > 0.0 && state.tracked <= 0.0 {
                    crossing = t;
                }
                prev = state.tracked;
            }
            // Last downward reference zero is at t = 9 s; the tracker follows late.
            crossing - 9.0
        };
        let slow = lag_for(10.0);
        let fast = lag_for(30.0);
        assert!(slow > fast && fast > 0.0, "lags: slow {slow}, fast {fast}");
    }

    #[test]
    fn pd_law_matches_reference_arithmetic() {
        let mut td = TdState::with_reference_gains(0.0);
        assert_eq!(control_pd(&td, 0.0, 1.02), 0.0);
        td.tracked = 0.1;
        assert_abs_diff_eq!(control_pd(&td, 0.0, 1.02), 0.102, epsilon = 1e-12);
        td.tracked = 0.0;
        td.rate = 0.2;
        assert_abs_diff_eq!(control_pd(&td, 0.0, 1.02), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn qsc_law_matches_reference_arithmetic() {
        let u = control_qsc(0.1, 0.0, 1.0, ControllerVariant::Qsc, 0.05).unwrap();
        assert_abs_diff_eq!(u, 0.1, epsilon = 1e-12);
        let u = control_qsc(0.1, 0.02, 0.5, ControllerVariant::Qsc, 0.05).unwrap();
        assert_abs_diff_eq!(u, 0.16, epsilon = 1e-12);
        assert!(matches!(
            control_qsc(0.1, 0.0, 0.0, ControllerVariant::Qsc, 0.05),
            Err(ControlError::SingularJacobian)
        ));
        let u = control_qsc(0.1, 0.02, 0.01, ControllerVariant::DampedQsc, 0.05).unwrap();
        assert_abs_diff_eq!(u, (0.1 - 0.02) / 0.05, epsilon = 1e-12);
    }

    #[test]
    fn damped_law_magnitude_bound_holds() {
        let lambda = 0.05;
        let mut j = -0.2;
        while j < 0.2 {
            for (u0, x2) in [(0.3, -0.1), (-0.4, 0.2), (0.05, 0.04)] {
                let u = control_qsc(u0, x2, j, ControllerVariant::DampedQsc, lambda).unwrap();
                assert!(u.abs() <= (u0.abs() + x2.abs()) / lambda + 1e-12);
            }
            j += 0.003;
        }
    }

    #[test]
    fn qsc_closed_loop_error_decays_at_proportional_gain() {
        let setup = test_setup(JacobianMode::Exact);
        let mut solver =
            BvpSolver::new(setup.params, setup.plane, setup.settings).unwrap();
        let act0 = Actuation {
            magnet_position: setup.magnet_position,
            psi: 0.0,
            moment: setup.moment,
        };
        let shape0 = solver.solve(&act0).unwrap();
        let y0 = shape0.tip_angle();
        let reference = y0 + 0.05;
        let k = 1.02;
        let dt = 0.01;
        let mut leso = LesoState::with_reference_gains(y0);
        let mut psi = 0.0;
        let mut u_prev = 0.0;
        let mut samples = Vec::new();
        for step in 0..800 {
            let act = Actuation { psi, ..act0 };
            let shape = solver.solve(&act).unwrap();
            let y = shape.tip_angle();
            let j = analytic_jacobian(&setup.params, &act, setup.plane, &shape)
                .unwrap()
                .tip();
            leso = leso_step(&leso, y, u_prev, j, dt);
            let u0 = k * (reference - leso.x1_hat);
            let u = (u0 - leso.x2_hat) / j;
            samples.push((step as f64 * dt, (reference - y).abs()));
            psi += u * dt;
            u_prev = u;
        }
        let window: Vec<_> =
            samples.iter().filter(|(t, e)| *t >= 2.0 && *t <= 6.0 && *e > 1e-9).collect();
        let n = window.len() as f64;
        let (mut st, mut se, mut stt, mut ste) = (0.0, 0.0, 0.0, 0.0);
        for (t, e) in &window {
            st += t;
            se += e.ln();
            stt += t * t;
            ste += t * e.ln();
        }
        let slope = (n * ste - st * se) / (n * stt - st * st);
        assert_relative_eq!(-slope, k, max_relative = 0.1);
    }

    #[test]
    fn metrics_are_zero_for_settled_trace() {
        let rows: Vec<TraceRow> = (0..100)
            .map(|k| TraceRow {
                t: k as f64 * 0.01,
                y_r: 0.2,
                y_r_tracked: 0.2,
                theta_l: 0.2,
                x1_hat: 0.2,
                x2_hat: 0.0,
                u: 0.0,
                psi: 0.5,
            })
            .collect();
        let m = trace_metrics(&SimTrace { rows, dt: 0.01, limit_hit: false }).unwrap();
        assert_eq!(m.overshoot_pct, 0.0);
        assert_eq!(m.steady_state_error, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.control_energy, 0.0);
        assert_eq!(m.sign_flips, 0);
    }

    #[test]
    fn metrics_monotone_approach_has_no_overshoot() {
        let rows: Vec<TraceRow> = (0..2000)
            .map(|k| {
                let t = k as f64 * 0.01;
                TraceRow {
                    t,
                    y_r: 1.0,
                    y_r_tracked: 1.0,
                    theta_l: 1.0 - (-t).exp(),
                    x1_hat: 0.0,
                    x2_hat: 0.0,
                    u: 0.0,
                    psi: 0.0,
                }
            })
            .collect();
        let m = trace_metrics(&SimTrace { rows, dt: 0.01, limit_hit: false }).unwrap();
        assert_eq!(m.overshoot_pct, 0.0);
    }

    #[test]
    fn metrics_match_second_order_overshoot_formula() {
        let zeta: f64 = 0.5;
        let wn = 2.0;
        let wd = wn * (1.0 - zeta * zeta).sqrt();
        let dt = 0.001;
        let rows: Vec<TraceRow> = (0..12000)
            .map(|k| {
                let t = k as f64 * dt;
                let y = 1.0
                    - (-zeta * wn * t).exp()
                        * ((wd * t).cos() + zeta * wn / wd * (wd * t).sin());
                TraceRow {
                    t,
                    y_r: 1.0,
                    y_r_tracked: 1.0,
                    theta_l: y,
                    x1_hat: y,
                    x2_hat: 0.0,
                    u: 0.0,
                    psi: 0.0,
                }
            })
            .collect();
        let m = trace_metrics(&SimTrace { rows, dt, limit_hit: false }).unwrap();
        let expected = 100.0 * (-PI * zeta / (1.0 - zeta * zeta).sqrt()).exp();
        assert_relative_eq!(m.overshoot_pct, expected, max_relative = 0.01);
    }

    #[test]
    fn sign_flip_counters_agree_on_synthetic_commands() {
        let us = [1.0, -1.0, 1.0, 0.0, 2.0, -3.0, -4.0, 5.0];
        let rows: Vec<TraceRow> = us
            .iter()
            .enumerate()
            .map(|(k, &u)| TraceRow {
                t: k as f64 * 0.01,
                y_r: 0.0,
                y_r_tracked: 0.0,
                theta_l: 0.0,
                x1_hat: 0.0,
                x2_hat: 0.0,
                u,
                psi: 0.0,
            })
            .collect();
        let trace = SimTrace { rows, dt: 0.01, limit_hit: false };
        let m = trace_metrics(&trace).unwrap();
        assert_eq!(m.sign_flips, 4);
        assert_eq!(max_sign_flips_in_window(&trace, 10.0), 4);
        assert_eq!(max_sign_flips_in_window(&trace, 0.011), 2);
    }

    #[test]
    fn simulate_rejects_oversized_step() {
        let setup = test_setup(JacobianMode::Exact);
        let err = simulate_closed_loop(
            &setup,
            &ControllerConfig::default(),
            &ReferenceSignal::Step { amplitude: 0.05 },
            &Disturbance::None,
            &SimConfig { dt: 0.05, duration: 1.0, seed: 0, measurement_noise: 0.0 },
        )
        .unwrap_err();
        assert!(matches!(err, ControlError::InvalidParameter(_)));
    }

    #[test]
    fn simulate_is_deterministic_under_seed() {
        let setup = test_setup(JacobianMode::Table { points: 33 });
        let controller = ControllerConfig::default();
        let reference = ReferenceSignal::Step { amplitude: 0.08 };
        let disturbance = Disturbance::Noise { magnitude: 0.005, start: 0.2, cutoff_hz: 5.0 };
        let sim = SimConfig { dt: 0.01, duration: 1.5, seed: 42, measurement_noise: 0.002 };
        let a = simulate_closed_loop(&setup, &controller, &reference, &disturbance, &sim).unwrap();
        let b = simulate_closed_loop(&setup, &controller, &reference, &disturbance, &sim).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.rows.len(), 150);
    }

    #[test]
    fn simulate_qsc_reachable_step_settles_without_overshoot() {
        let setup = test_setup(JacobianMode::Table { points: 129 });
        let controller = ControllerConfig::default();
        let trace = simulate_closed_loop(
            &setup,
            &controller,
            &ReferenceSignal::Step { amplitude: 0.08 },
            &Disturbance::None,
            &SimConfig { dt: 0.01, duration: 8.0, seed: 0, measurement_noise: 0.0 },
        )
        .unwrap();
        let m = trace_metrics(&trace).unwrap();
        assert!(m.overshoot_pct < 1.0, "overshoot {}%", m.overshoot_pct);
        let last = trace.rows.last().unwrap();
        assert!((last.y_r - last.theta_l).abs() < 0.02);
        assert!(!trace.limit_hit);
    }

    #[test]
    fn simulate_pd_runs_into_joint_limit_on_unreachable_step() {
        let setup = test_setup(JacobianMode::Table { points: 129 });
        let controller = ControllerConfig {
            variant: ControllerVariant::Pd,
            rate_limit: Some(2.0),
            ..ControllerConfig::default()
        };
        let trace = simulate_closed_loop(
            &setup,
            &controller,
            &ReferenceSignal::Step { amplitude: 0.45 },
            &Disturbance::None,
            &SimConfig { dt: 0.01, duration: 7.0, seed: 0, measurement_noise: 0.0 },
        )
        .unwrap();
        assert!(trace.limit_hit);
        let max_psi = trace.rows.iter().map(|r| r.psi).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(max_psi, controller.psi_max, epsilon = 1e-9);
    }
}
