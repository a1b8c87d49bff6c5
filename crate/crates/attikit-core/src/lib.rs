//! Reaction-wheel spacecraft attitude dynamics, learned-dynamics models, and
//! model-predictive controllers.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: every entry
//! point is a deterministic function of its arguments and an explicit seed.
//! File formats, configuration parsing, and campaign parallelism live in the
//! companion `attikit` crate.
//!
//! Module map:
//! - [`quat`] / [`dynamics`]: the analytic plant — quaternion kinematics,
//!   rigid-body + reaction-wheel dynamics, disturbances, friction, RK4.
//! - [`dataset`]: excitation campaigns and supervised transition samples.
//! - [`mlp`]: the multilayer-perceptron dynamics regressor with exact
//!   reverse-mode gradients.
//! - [`training`]: data-driven and physics-informed losses, dual weighting,
//!   and the mini-batch training loop.
//! - [`control`]: nonlinear (learned or analytic) MPC, linear MPC, and the
//!   hybrid switching controller.
//! - [`eval`]: regressor metrics, Monte-Carlo closed-loop campaigns, and
//!   the signed-rank significance test.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod control;
pub mod dataset;
pub mod dynamics;
pub mod eval;
pub mod mlp;
pub mod quat;
pub mod stats;
pub mod training;

use core::fmt;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Plant parameters violate their invariants (e.g. non-symmetric or
    /// non-positive-definite inertia).
    InvalidParams(&'static str),
    /// Integration produced a non-finite state; carries the step index.
    Integration { step: usize },
    /// A campaign or batch could not be constructed from the given data.
    Construction(&'static str),
    /// Model parameters are non-finite or inconsistent.
    ModelCorrupt(&'static str),
    /// An operation was called before its prerequisite (e.g. backward
    /// before forward).
    Usage(&'static str),
    /// Training diverged; carries the epoch index.
    Divergence { epoch: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
            CoreError::Integration { step } => {
                write!(f, "integration produced a non-finite state at step {step}")
            }
            CoreError::Construction(msg) => write!(f, "construction error: {msg}"),
            CoreError::ModelCorrupt(msg) => write!(f, "model corrupt: {msg}"),
            CoreError::Usage(msg) => write!(f, "usage error: {msg}"),
            CoreError::Divergence { epoch } => {
                write!(f, "training diverged at epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
