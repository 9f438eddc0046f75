//! Terminal-distribution alignment of pretrained flow samplers via batched
//! optimal control.

pub mod alignment;
pub mod controller;
pub mod diffnet;
pub mod dynamics;
pub mod error;
pub mod generative;
pub mod memory;
pub mod numerics;

pub use alignment::{
    evaluate, AttributeDistribution, AttributeOracle, Axis, ClassifierOracle, Evaluation, JointEstimator, Metrics,
    Oracle, RbfOracle, TargetPreset, TargetSpec,
};
pub use controller::{solve_emsa, TOY_CONTROL_BOUND, EmsaOutcome, RunReport, SolverConfig, UpdateCoefficients};
pub use diffnet::{Checkpoint, HeadKind, MlpNet, TimeEmbedding};
pub use dynamics::{BatchState, ControlTrajectory, ControlledDynamics, Denoiser, Dynamics, Instance, TimeGrid};
pub use error::{Error, Result};
pub use generative::{AlphaSchedule, GenerativeModel, MixtureSpec};
pub use numerics::{Matrix, Rng};

/// Crate version, echoed into run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
