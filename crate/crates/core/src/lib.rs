//! Baseline-corrected off-policy estimation and learning for contextual bandits.
//!
//! The crate is organised bottom-up:
//!
//! * [`policy`]: logged data types and the linear softmax policy with analytic gradients.
//! * [`simulator`]: a synthetic environment with known expected rewards.
//! * [`estimators`]: IPS, SNIPS, DR, beta-IPS, their gradients and the closed-form baselines.
//! * [`learning`]: Adam-based full-batch and mini-batch training loops.
//! * [`evaluation`]: replicated off-policy evaluation experiments.
//! * [`io`] and [`cli`]: file formats, configuration and the command line.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod io;
pub mod learning;
pub mod policy;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
pub use estimators::{BaselineMode, EstimateBreakdown, RewardModel};
pub use learning::{BatchSize, OptimizerConfig, TrainingReport};
pub use policy::{GradientVector, LinearSoftmaxPolicy, LoggedDataset, LoggedInteraction, Policy};
pub use simulator::{Environment, EnvironmentConfig};
