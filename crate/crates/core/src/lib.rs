//! Modeling and closed-loop control of a magnetic soft continuum robot (MSCR)
//! actuated by a single rotating permanent magnet.
//!
//! The crate is organised as a pipeline of sans-IO modules:
//!
//! - [`magnetics`]: point-dipole field model, input-separated field operators,
//!   and least-squares calibration of the actuator moment from bench samples.
//! - [`elastica`]: hard-magnetic elastica boundary value problem solved by
//!   shooting, workspace sweeps over the magnet rotation angle, and the
//!   actuation feasibility check.
//! - [`jacobian`]: analytic tip-deflection Jacobian via a sensitivity
//!   boundary value problem solved by superposition, with a finite-difference
//!   fallback and singularity tabulation.
//! - [`control`]: tracking differentiator, linear extended state observer,
//!   and the quasi-static compensation controller family (PD / QSC /
//!   damped QSC) with a closed-loop simulator.
//! - [`vision`]: conic-fitting tip-angle estimator on rasterised binary
//!   frames, plus PGM/PBM image IO.
//! - [`pathfollow`]: task-space path following that coordinates the magnet
//!   rotation with a translating robot base.
//!
//! All quantities are SI (metres, radians, teslas, A·m²) unless a name says
//! otherwise.

pub mod control;
pub mod elastica;
pub mod jacobian;
pub mod magnetics;
pub mod pathfollow;
pub mod vision;
