//! Positional control of the robot tip by coordinating the magnet rotation
//! with a translating robot base.
//!
//! The base slides along the world x axis by `nu`, so the tip position is the
//! solved shape's free-end point plus `[nu, 0, 0]`. Differentiating that map
//! gives a 3x2 task Jacobian whose columns are the base axis and the
//! arc-length-integrated angle sensitivity; a pseudo-inverse proportional law
//! then regulates the tip to waypoints along a reference path.

use crate::elastica::{Actuation, BvpSolver, ElasticaError, Plane, Shape};
use crate::jacobian::{analytic_jacobian, JacobianError, JacobianProfile};
use nalgebra::{Matrix3x2, Vector2, Vector3};
use std::collections::VecDeque;
use std::fmt::Write as _;
use thiserror::Error;

/// Errors raised by task-space path following.
#[derive(Debug, Error)]
pub enum PathError {
    /// A parameter fails validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// The path has too few waypoints to be a sampled curve.
    #[error("path needs at least {needed} waypoints, got {got}")]
    TooFewWaypoints { needed: usize, got: usize },
    /// The task Jacobian lost rank, so tip motion off the base axis is not
    /// controllable at this configuration.
    #[error("task jacobian is rank deficient (condition number {condition:.3e})")]
    SingularTaskJacobian { condition: f64 },
    /// The elastica solve failed mid-run.
    #[error("elastica solve failed during path following")]
    Elastica(#[from] ElasticaError),
    /// The angle-sensitivity profile failed mid-run.
    #[error("tip sensitivity failed during path following")]
    Jacobian(#[from] JacobianError),
}

/// Translating base along the world x axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseState {
    /// Displacement along the world x axis (m).
    pub nu: f64,
    /// Lower travel limit (m).
    pub nu_min: f64,
    /// Upper travel limit (m).
    pub nu_max: f64,
}

impl BaseState {
    pub fn new(nu: f64, nu_min: f64, nu_max: f64) -> Result<Self, PathError> {
        let state = Self { nu, nu_min, nu_max };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), PathError> {
        if !(self.nu_min < self.nu_max) {
            return Err(PathError::InvalidParameter(format!(
                "base travel limits must satisfy nu_min < nu_max, got [{}, {}]",
                self.nu_min, self.nu_max
            )));
        }
        if !(self.nu_min..=self.nu_max).contains(&self.nu) {
            return Err(PathError::InvalidParameter(format!(
                "base displacement {} outside travel limits [{}, {}]",
                self.nu, self.nu_min, self.nu_max
            )));
        }
        Ok(())
    }
}

/// 3x2 sensitivity of the tip position to `(nu, psi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskJacobian {
    /// Columns: `d x_L / d nu` (always the base axis) and `d x_L / d psi`.
    pub b: Matrix3x2<f64>,
    /// Ratio of the two singular values.
    pub condition: f64,
}

/// Tip position for an actuation with the base displaced by `nu`.
pub fn tip_position(
    solver: &mut BvpSolver,
    act: &Actuation,
    nu: f64,
) -> Result<Vector3<f64>, ElasticaError> {
    let shape = solver.solve(act)?;
    Ok(shape.tip_position() + Vector3::new(nu, 0.0, 0.0))
}

/// Task Jacobian from a converged shape and its angle-sensitivity profile.
///
/// The psi column integrates the pointwise sensitivity along the body:
/// `d x_L / d psi = R(phi) * [-int sin(theta) J, int cos(theta) J, 0]`,
/// by trapezoidal quadrature on the shared arc-length grid. The nu column is
/// exactly the world x axis.
pub fn task_jacobian(shape: &Shape, profile: &JacobianProfile, plane: Plane) -> TaskJacobian {
    let mut ix = 0.0;
    let mut iy = 0.0;
    for w in profile.s.windows(2).zip(profile.j.windows(2)) {
        let ((s0, s1), (j0, j1)) = ((w.0[0], w.0[1]), (w.1[0], w.1[1]));
        let th0 = shape.theta_at(s0).expect("profile grid lies on the body");
        let th1 = shape.theta_at(s1).expect("profile grid lies on the body");
        let ds = s1 - s0;
        ix += 0.5 * ds * (th0.sin() * j0 + th1.sin() * j1);
        iy += 0.5 * ds * (th0.cos() * j0 + th1.cos() * j1);
    }
    let col_psi = plane.rotation() * Vector3::new(-ix, iy, 0.0);
    let b = Matrix3x2::from_columns(&[Vector3::x(), col_psi]);
    let sv = b.svd(false, false).singular_values;
    let (hi, lo) = (sv[0].max(sv[1]), sv[0].min(sv[1]));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    TaskJacobian { b, condition }
}

/// Pseudo-inverse proportional law `u = B^+ (xdot_ref + k_x (x_ref - x))`.
///
/// Both the feedforward task velocity and the proportional error term pass
/// through the pseudo-inverse so the output has joint units. For the tall
/// full-column-rank `B` this is the least-squares tip-velocity match.
pub fn pseudo_inverse_control(
    tj: &TaskJacobian,
    x_l: Vector3<f64>,
    x_ref: Vector3<f64>,
    xdot_ref: Vector3<f64>,
    k_x: f64,
) -> Result<Vector2<f64>, PathError> {
    if !(k_x >= 0.0) || !k_x.is_finite() {
        return Err(PathError::InvalidParameter(format!(
            "gain k_x must be finite and non-negative, got {k_x}"
        )));
    }
    if !tj.b.iter().all(|v| v.is_finite()) {
        return Err(PathError::InvalidParameter(
            "task jacobian has non-finite entries".into(),
        ));
    }
    if tj.condition > 1e6 {
        return Err(PathError::SingularTaskJacobian {
            condition: tj.condition,
        });
    }
    let pinv = tj
        .b
        .svd(true, true)
        .pseudo_inverse(1e-14)
        .map_err(|e| PathError::InvalidParameter(e.to_string()))?;
    Ok(pinv * (xdot_ref + k_x * (x_ref - x_l)))
}

/// Sampled reference path with the waypoint-advance rule parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    /// Ordered waypoints (m).
    pub waypoints: Vec<Vector3<f64>>,
    /// Relative error-change rate (over the advance window) below which the
    /// error is considered plateaued and the next waypoint is taken.
    pub advance_threshold: f64,
    /// Absolute positional error (m) at which a waypoint counts as reached.
    /// A pure proportional loop decays exponentially, so its relative error
    /// change never falls below `k_x * window * dt`; this tolerance is what
    /// lets converged waypoints advance.
    pub advance_tol: f64,
}

/// Minimum number of waypoints for a sampled path.
pub const MIN_WAYPOINTS: usize = 90;

impl PathSpec {
    pub fn new(waypoints: Vec<Vector3<f64>>) -> Self {
        Self {
            waypoints,
            advance_threshold: 0.01,
            advance_tol: 2e-5,
        }
    }

    pub fn validate(&self) -> Result<(), PathError> {
        if self.waypoints.len() < MIN_WAYPOINTS {
            return Err(PathError::TooFewWaypoints {
                needed: MIN_WAYPOINTS,
                got: self.waypoints.len(),
            });
        }
        if self.waypoints.iter().any(|w| !w.iter().all(|v| v.is_finite())) {
            return Err(PathError::InvalidParameter(
                "waypoints must be finite".into(),
            ));
        }
        if !(self.advance_threshold > 0.0 && self.advance_threshold < 1.0) {
            return Err(PathError::InvalidParameter(format!(
                "advance threshold must lie in (0, 1), got {}",
                self.advance_threshold
            )));
        }
        if !(self.advance_tol > 0.0) {
            return Err(PathError::InvalidParameter(format!(
                "advance tolerance must be positive, got {}",
                self.advance_tol
            )));
        }
        Ok(())
    }
}

/// Knobs for the path-following loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowConfig {
    /// Control period (s).
    pub dt: f64,
    /// Proportional gain on the tip position error.
    pub k_x: f64,
    /// Base speed limit (m/s).
    pub base_rate_limit: f64,
    /// Magnet rotation speed limit (rad/s), if any.
    pub psi_rate_limit: Option<f64>,
    /// Magnet rotation limits (rad).
    pub psi_min: f64,
    pub psi_max: f64,
    /// Steps allowed per waypoint before the run times out.
    pub step_budget: usize,
    /// Steps across which the relative error change is measured.
    pub advance_window: usize,
}

impl Default for FollowConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            k_x: 0.5,
            base_rate_limit: 5e-3,
            psi_rate_limit: None,
            psi_min: -3.0 * std::f64::consts::FRAC_PI_4,
            psi_max: 3.0 * std::f64::consts::FRAC_PI_4,
            step_budget: 3000,
            advance_window: 5,
        }
    }
}

impl FollowConfig {
    pub fn validate(&self) -> Result<(), PathError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(PathError::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.k_x > 0.0) || !self.k_x.is_finite() {
            return Err(PathError::InvalidParameter(format!(
                "k_x must be positive, got {}",
                self.k_x
            )));
        }
        if !(self.base_rate_limit > 0.0) {
            return Err(PathError::InvalidParameter(format!(
                "base rate limit must be positive, got {}",
                self.base_rate_limit
            )));
        }
        if let Some(r) = self.psi_rate_limit {
            if !(r > 0.0) {
                return Err(PathError::InvalidParameter(format!(
                    "psi rate limit must be positive, got {r}"
                )));
            }
        }
        if !(self.psi_min < self.psi_max) {
            return Err(PathError::InvalidParameter(format!(
                "psi limits must satisfy min < max, got [{}, {}]",
                self.psi_min, self.psi_max
            )));
        }
        if self.step_budget == 0 {
            return Err(PathError::InvalidParameter(
                "step budget must be at least 1".into(),
            ));
        }
        if self.advance_window == 0 {
            return Err(PathError::InvalidParameter(
                "advance window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowRow {
    pub t: f64,
    pub reference: Vector3<f64>,
    pub tip: Vector3<f64>,
    pub nu: f64,
    pub psi: f64,
}

/// Outcome of a path-following run.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowResult {
    pub rows: Vec<FollowRow>,
    /// Positional error when each attempted waypoint was left (advance or
    /// timeout).
    pub waypoint_errors: Vec<f64>,
    /// Root-mean-square of the waypoint errors (m).
    pub rmse: f64,
    /// RMSE as a percentage of the robot length.
    pub rmse_pct_length: f64,
    /// Waypoints advanced past before the run ended.
    pub completed: usize,
    /// Whether some waypoint exhausted its step budget.
    pub timed_out: bool,
}

impl FollowResult {
    /// Per-step log as CSV.
    pub fn csv(&self) -> String {
        let mut out = String::from("t,x_ref,y_ref,z_ref,x,y,z,nu,psi\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.reference.x,
                r.reference.y,
                r.reference.z,
                r.tip.x,
                r.tip.y,
                r.tip.z,
                r.nu,
                r.psi
            );
        }
        out
    }
}

/// Follows a sampled path waypoint by waypoint.
///
/// Each step solves the elastica at the current magnet angle, forms the task
/// Jacobian from the analytic angle-sensitivity profile, applies the
/// pseudo-inverse law toward the current waypoint (rate- and travel-limited),
/// and integrates `(nu, psi)`. The loop advances to the next waypoint once
/// the positional error is inside the arrival tolerance or its relative
/// change over the advance window falls below the plateau threshold; a
/// waypoint that exhausts the step budget ends the run with partial results.
pub fn follow_path(
    solver: &mut BvpSolver,
    magnet_position: Vector3<f64>,
    moment: f64,
    psi0: f64,
    base: BaseState,
    path: &PathSpec,
    config: &FollowConfig,
) -> Result<FollowResult, PathError> {
    path.validate()?;
    config.validate()?;
    base.validate()?;
    if !(config.psi_min..=config.psi_max).contains(&psi0) {
        return Err(PathError::InvalidParameter(format!(
            "initial magnet angle {psi0} outside limits [{}, {}]",
            config.psi_min, config.psi_max
        )));
    }
    let plane = solver.plane();
    let length = solver.params().length;

    let mut nu = base.nu;
    let mut psi = psi0;
    let mut t = 0.0;
    let mut rows = Vec::new();
    let mut waypoint_errors = Vec::new();
    let mut completed = 0;
    let mut timed_out = false;

    'waypoints: for &target in &path.waypoints {
        let mut window: VecDeque<f64> = VecDeque::with_capacity(config.advance_window + 1);
        for step in 0..config.step_budget {
            let act = Actuation {
                magnet_position,
                psi,
                moment,
            };
            let shape = solver.solve(&act)?;
            let tip = shape.tip_position() + Vector3::new(nu, 0.0, 0.0);
            let profile = analytic_jacobian(solver.params(), &act, plane, &shape)?;
            let tj = task_jacobian(&shape, &profile, plane);
            let error = (target - tip).norm();

            rows.push(FollowRow {
                t,
                reference: target,
                tip,
                nu,
                psi,
            });

            window.push_back(error);
            if window.len() > config.advance_window + 1 {
                window.pop_front();
            }
            let plateaued = window.len() == config.advance_window + 1 && {
                let oldest = window[0];
                oldest <= f64::EPSILON
                    || ((oldest - error).abs() / oldest) < path.advance_threshold
            };
            if error < path.advance_tol || (step >= config.advance_window && plateaued) {
                waypoint_errors.push(error);
                completed += 1;
                continue 'waypoints;
            }

            let mut u = pseudo_inverse_control(&tj, tip, target, Vector3::zeros(), config.k_x)?;
            u.x = u.x.clamp(-config.base_rate_limit, config.base_rate_limit);
            if let Some(r) = config.psi_rate_limit {
                u.y = u.y.clamp(-r, r);
            }
            nu = (nu + u.x * config.dt).clamp(base.nu_min, base.nu_max);
            psi = (psi + u.y * config.dt).clamp(config.psi_min, config.psi_max);
            t += config.dt;
        }
        let last_error = window.back().copied().unwrap_or(f64::INFINITY);
        waypoint_errors.push(last_error);
        timed_out = true;
        break;
    }

    let rmse = if waypoint_errors.is_empty() {
        0.0
    } else {
        (waypoint_errors.iter().map(|e| e * e).sum::<f64>() / waypoint_errors.len() as f64).sqrt()
    };
    Ok(FollowResult {
        rows,
        waypoint_errors,
        rmse,
        rmse_pct_length: 100.0 * rmse / length,
        completed,
        timed_out,
    })
}

/// Cylindrical bound on where the tip can reach: the radius covers the
/// largest off-axis tip deflection over a full magnet revolution, and the
/// axis segment covers the tip x range extended by the base travel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceEnvelope {
    pub radius: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl WorkspaceEnvelope {
    /// Whether a point lies inside the envelope inflated by `margin`.
    pub fn contains(&self, p: Vector3<f64>, margin: f64) -> bool {
        let r = (p.y * p.y + p.z * p.z).sqrt();
        r <= self.radius + margin && p.x >= self.x_min - margin && p.x <= self.x_max + margin
    }
}

/// Sweeps the magnet angle to bound the reachable tip set for a base range.
pub fn workspace_envelope(
    solver: &mut BvpSolver,
    magnet_position: Vector3<f64>,
    moment: f64,
    base: &BaseState,
    samples: usize,
) -> Result<WorkspaceEnvelope, ElasticaError> {
    let n = samples.max(2);
    let mut radius = 0.0f64;
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    for i in 0..n {
        let psi = -std::f64::consts::PI
            + 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
        let act = Actuation {
            magnet_position,
            psi,
            moment,
        };
        let tip = solver.solve(&act)?.tip_position();
        radius = radius.max((tip.y * tip.y + tip.z * tip.z).sqrt());
        x_lo = x_lo.min(tip.x);
        x_hi = x_hi.max(tip.x);
    }
    Ok(WorkspaceEnvelope {
        radius,
        x_min: x_lo + base.nu_min,
        x_max: x_hi + base.nu_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elastica::{RobotParams, SolverSettings};
    use crate::jacobian::{BlendMethod, CouplingBound};
    use approx::assert_relative_eq;

    fn solver_for(params: RobotParams) -> BvpSolver {
        BvpSolver::new(params, Plane::default(), SolverSettings::default()).unwrap()
    }

    fn act(params: &RobotParams, h: f64, psi: f64, moment: f64) -> Actuation {
        Actuation {
            magnet_position: Vector3::new(params.length, h, 0.0),
            psi,
            moment,
        }
    }

    #[test]
    fn unloaded_tip_translates_with_the_base() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.3, 0.0);
        let tip = tip_position(&mut solver, &a, 0.01).unwrap();
        assert_relative_eq!(tip.x, 0.01 + params.length, epsilon = 1e-12);
        assert_relative_eq!(tip.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(tip.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tip_position_is_equivariant_under_base_translation() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 1.2, 342.86);
        let fixed = tip_position(&mut solver, &a, 0.0).unwrap();
        let moved = tip_position(&mut solver, &a, 0.0075).unwrap();
        assert_relative_eq!(
            (moved - fixed - Vector3::new(0.0075, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn task_jacobian_base_column_is_the_world_x_axis() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.9, 342.86);
        let shape = solver.solve(&a).unwrap();
        let profile = analytic_jacobian(&params, &a, solver.plane(), &shape).unwrap();
        let tj = task_jacobian(&shape, &profile, solver.plane());
        assert_eq!(tj.b.column(0), Vector3::x().column(0));
    }

    #[test]
    fn straight_shape_maps_sensitivity_to_the_plane_normal_axis() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.0, 0.0);
        let shape = solver.solve(&a).unwrap();
        // Hand-built profile J(s) = 1 over a straight body: the psi column
        // must be [0, int J ds, 0] = [0, L, 0].
        let n = 65;
        let s: Vec<f64> = (0..n)
            .map(|i| params.length * i as f64 / (n - 1) as f64)
            .collect();
        let profile = JacobianProfile {
            s: s.clone(),
            j: vec![1.0; n],
            dj: vec![0.0; n],
            method: BlendMethod::Superposed { v: 0.0 },
            bound: CouplingBound {
                k: 0.0,
                field_envelope: 0.0,
                gradient_term: 0.0,
                hessian_term: 0.0,
                min_distance: 0.18,
                in_set: true,
            },
        };
        let tj = task_jacobian(&shape, &profile, solver.plane());
        assert_relative_eq!(tj.b[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(tj.b[(1, 1)], params.length, max_relative = 1e-9);
        assert_relative_eq!(tj.b[(2, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn task_jacobian_matches_finite_differences_across_configurations() {
        let cases = [
            (RobotParams::mscr1(), 0.18),
            (RobotParams::mscr2(), 0.17),
        ];
        let delta = 1e-5;
        for (params, h) in cases {
            let mut solver = solver_for(params);
            for i in 0..10 {
                let psi = -2.2 + 4.4 * i as f64 / 9.0;
                let a = act(&params, h, psi, 342.86);
                let shape = solver.solve(&a).unwrap();
                let profile = analytic_jacobian(&params, &a, solver.plane(), &shape).unwrap();
                let tj = task_jacobian(&shape, &profile, solver.plane());

                let hi = tip_position(
                    &mut solver,
                    &Actuation {
                        psi: psi + delta,
                        ..a
                    },
                    0.0,
                )
                .unwrap();
                let lo = tip_position(
                    &mut solver,
                    &Actuation {
                        psi: psi - delta,
                        ..a
                    },
                    0.0,
                )
                .unwrap();
                let fd = (hi - lo) / (2.0 * delta);
                for r in 0..3 {
                    assert!(
                        (tj.b[(r, 1)] - fd[r]).abs() < 1e-3,
                        "component {r} analytic {} vs fd {} at psi={psi}",
                        tj.b[(r, 1)],
                        fd[r]
                    );
                }
            }
        }
    }

    #[test]
    fn control_law_is_zero_at_the_reference() {
        let tj = TaskJacobian {
            b: Matrix3x2::from_columns(&[Vector3::x(), Vector3::new(0.0, 0.002, 0.0)]),
            condition: 500.0,
        };
        let x = Vector3::new(0.03, 0.001, 0.0);
        let u = pseudo_inverse_control(&tj, x, x, Vector3::zeros(), 0.5).unwrap();
        assert_relative_eq!(u.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn axis_aligned_error_routes_through_the_matching_joint() {
        let tj = TaskJacobian {
            b: Matrix3x2::from_columns(&[Vector3::x(), Vector3::new(0.0, 0.004, 0.0)]),
            condition: 250.0,
        };
        let x_ref = Vector3::new(0.032, 0.0, 0.0);
        let x = Vector3::new(0.030, 0.0, 0.0);
        let u = pseudo_inverse_control(&tj, x, x_ref, Vector3::zeros(), 0.5).unwrap();
        assert_relative_eq!(u.x, 0.5 * 0.002, max_relative = 1e-12);
        assert_relative_eq!(u.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_inverse_is_a_left_inverse_and_least_squares_optimal() {
        let tj = TaskJacobian {
            b: Matrix3x2::from_columns(&[
                Vector3::x(),
                Vector3::new(-0.0011, 0.0043, 0.0),
            ]),
            condition: 300.0,
        };
        let pinv = tj.b.svd(true, true).pseudo_inverse(1e-14).unwrap();
        let eye = pinv * tj.b;
        assert_relative_eq!(eye[(0, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(eye[(1, 1)], 1.0, epsilon = 1e-9);
        assert!(eye[(0, 1)].abs() < 1e-9 && eye[(1, 0)].abs() < 1e-9);

        let x_ref = Vector3::new(0.031, 0.0015, 0.0);
        let x = Vector3::new(0.0295, -0.0004, 0.0);
        let v = 0.5 * (x_ref - x);
        let u = pseudo_inverse_control(&tj, x, x_ref, Vector3::zeros(), 0.5).unwrap();
        let base = (tj.b * u - v).norm();
        for d in [
            Vector2::new(1e-3, 0.0),
            Vector2::new(0.0, 1e-3),
            Vector2::new(-7e-4, 4e-4),
        ] {
            assert!(
                (tj.b * (u + d) - v).norm() >= base - 1e-15,
                "a perturbed command must not beat the least-squares residual"
            );
        }
    }

    #[test]
    fn singular_task_jacobian_is_rejected() {
        let tj = TaskJacobian {
            b: Matrix3x2::from_columns(&[Vector3::x(), Vector3::new(1e-9, 0.0, 0.0)]),
            condition: 1e9,
        };
        assert!(matches!(
            pseudo_inverse_control(
                &tj,
                Vector3::zeros(),
                Vector3::x(),
                Vector3::zeros(),
                0.5
            ),
            Err(PathError::SingularTaskJacobian { .. })
        ));
    }

    #[test]
    fn path_validation_rejects_sparse_sampling() {
        let path = PathSpec::new(vec![Vector3::zeros(); 10]);
        assert!(matches!(
            path.validate(),
            Err(PathError::TooFewWaypoints { needed: 90, got: 10 })
        ));
    }

    fn line_path(start: Vector3<f64>, end: Vector3<f64>, n: usize) -> PathSpec {
        PathSpec::new(
            (0..n)
                .map(|i| start + (end - start) * (i as f64 / (n - 1) as f64))
                .collect(),
        )
    }

    #[test]
    fn straight_line_path_tracks_to_fractions_of_a_millimetre() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.0, 342.86);
        let start = tip_position(&mut solver, &a, 0.0).unwrap();
        let end = start + Vector3::new(0.012, 0.0, 0.0);
        let path = line_path(start, end, 95);
        let base = BaseState::new(0.0, -0.005, 0.02).unwrap();
        let result = follow_path(
            &mut solver,
            a.magnet_position,
            a.moment,
            0.0,
            base,
            &path,
            &FollowConfig::default(),
        )
        .unwrap();
        assert!(!result.timed_out, "run timed out");
        assert_eq!(result.completed, 95);
        assert!(
            result.rmse < 5e-5,
            "straight-line rmse {} m exceeds 0.05 mm",
            result.rmse
        );
    }

    fn two_arc_path(params: &RobotParams, y_amp: f64, n: usize) -> PathSpec {
        // Two blended circular arcs: bulge up, then bulge down, while the
        // base carries the tip forward in x.
        let x0 = params.length;
        let span = 0.012;
        PathSpec::new(
            (0..n)
                .map(|i| {
                    let f = i as f64 / (n - 1) as f64;
                    let y = if f < 0.5 {
                        y_amp * (std::f64::consts::PI * f * 2.0).sin()
                    } else {
                        -y_amp * (std::f64::consts::PI * (f - 0.5) * 2.0).sin()
                    };
                    Vector3::new(x0 + span * f, y, 0.0)
                })
                .collect(),
        )
    }

    #[test]
    fn two_arc_path_rmse_stays_under_five_percent_of_length() {
        let params = RobotParams::mscr2();
        let mut solver = solver_for(params);
        let h = 0.17;
        let path = two_arc_path(&params, 0.0022, 96);
        let base = BaseState::new(0.0, -0.01, 0.025).unwrap();
        let result = follow_path(
            &mut solver,
            Vector3::new(params.length, h, 0.0),
            342.86,
            0.0,
            base,
            &path,
            &FollowConfig::default(),
        )
        .unwrap();
        assert!(!result.timed_out, "run timed out");
        assert!(
            result.rmse_pct_length < 5.0,
            "two-arc rmse {}% of length",
            result.rmse_pct_length
        );
    }

    #[test]
    fn error_plateau_advances_past_an_unreachable_waypoint() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.0, 342.86);
        let start = tip_position(&mut solver, &a, 0.0).unwrap();
        // First half of the path asks for 8 mm of lateral deflection, far
        // beyond reach; the rest returns to the reachable start level.
        let mut wps = vec![start + Vector3::new(0.0, 0.008, 0.0); 45];
        wps.extend(vec![start; 45]);
        let path = PathSpec::new(wps);
        let base = BaseState::new(0.0, -0.005, 0.02).unwrap();
        // Rate-limit the magnet so the loop approaches the deflection
        // ceiling smoothly instead of leaping across it.
        let config = FollowConfig {
            psi_rate_limit: Some(2.0),
            ..FollowConfig::default()
        };
        let result = follow_path(
            &mut solver,
            a.magnet_position,
            a.moment,
            0.0,
            base,
            &path,
            &config,
        )
        .unwrap();
        assert!(!result.timed_out, "plateau rule should advance, not time out");
        assert_eq!(result.completed, 90);
        assert!(
            result.waypoint_errors[0] > 1e-3,
            "unreachable waypoint should be left with residual error, got {}",
            result.waypoint_errors[0]
        );
    }

    #[test]
    fn error_to_a_fixed_reachable_setpoint_decreases_monotonically() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.0, 342.86);
        let start = tip_position(&mut solver, &a, 0.0).unwrap();
        let target = start + Vector3::new(0.004, 0.0008, 0.0);
        let config = FollowConfig::default();

        let mut nu = 0.0;
        let mut psi = 0.0;
        let mut errors = Vec::new();
        for _ in 0..1200 {
            let a_k = Actuation { psi, ..a };
            let shape = solver.solve(&a_k).unwrap();
            let tip = shape.tip_position() + Vector3::new(nu, 0.0, 0.0);
            errors.push((target - tip).norm());
            let profile = analytic_jacobian(&params, &a_k, solver.plane(), &shape).unwrap();
            let tj = task_jacobian(&shape, &profile, solver.plane());
            let mut u =
                pseudo_inverse_control(&tj, tip, target, Vector3::zeros(), config.k_x).unwrap();
            u.x = u.x.clamp(-config.base_rate_limit, config.base_rate_limit);
            nu += u.x * config.dt;
            psi += u.y * config.dt;
        }
        for w in errors.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "error increased from {} to {}",
                w[0],
                w[1]
            );
        }
        assert!(errors.last().unwrap() < &2e-5);
    }

    #[test]
    fn followed_trace_stays_inside_the_workspace_cylinder() {
        let params = RobotParams::mscr2();
        let mut solver = solver_for(params);
        let h = 0.17;
        let magnet = Vector3::new(params.length, h, 0.0);
        let base = BaseState::new(0.0, -0.01, 0.025).unwrap();
        let envelope = workspace_envelope(&mut solver, magnet, 342.86, &base, 61).unwrap();
        let path = two_arc_path(&params, 0.0022, 96);
        let result = follow_path(
            &mut solver,
            magnet,
            342.86,
            0.0,
            base,
            &path,
            &FollowConfig::default(),
        )
        .unwrap();
        for row in &result.rows {
            assert!(
                envelope.contains(row.tip, 1e-4),
                "tip {:?} left the workspace envelope {:?}",
                row.tip,
                envelope
            );
        }
    }

    #[test]
    fn exhausted_step_budget_returns_partial_results() {
        let params = RobotParams::mscr1();
        let mut solver = solver_for(params);
        let a = act(&params, 0.18, 0.0, 342.86);
        let start = tip_position(&mut solver, &a, 0.0).unwrap();
        // Far x target with a tight budget: the rate-limited base cannot
        // arrive, and the linear approach never plateaus.
        let path = PathSpec::new(vec![start + Vector3::new(0.015, 0.0, 0.0); 90]);
        let base = BaseState::new(0.0, -0.005, 0.03).unwrap();
        let config = FollowConfig {
            step_budget: 40,
            ..FollowConfig::default()
        };
        let result = follow_path(
            &mut solver,
            a.magnet_position,
            a.moment,
            0.0,
            base,
            &path,
            &config,
        )
        .unwrap();
        assert!(result.timed_out);
        assert_eq!(result.completed, 0);
        assert_eq!(result.rows.len(), 40);
        assert!(result.waypoint_errors[0] > 1e-3);
    }

    #[test]
    fn csv_log_has_the_pinned_schema() {
        let result = FollowResult {
            rows: vec![FollowRow {
                t: 0.0,
                reference: Vector3::new(0.03, 0.001, 0.0),
                tip: Vector3::new(0.029, 0.0, 0.0),
                nu: 0.0,
                psi: 0.1,
            }],
            waypoint_errors: vec![1e-3],
            rmse: 1e-3,
            rmse_pct_length: 4.0,
            completed: 1,
            timed_out: false,
        };
        let csv = result.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x_ref,y_ref,z_ref,x,y,z,nu,psi");
        assert_eq!(lines.next().unwrap(), "0,0.03,0.001,0,0.029,0,0,0,0.1");
    }
}
