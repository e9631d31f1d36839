//! Synthetic experiments around the Kalman natural-gradient optimizer:
//! data generation, OOD corruption, an SGD baseline, training runs,
//! checkpoints, metrics files and parameter sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod oracle;
pub mod sweep;

pub use config::{ExperimentConfig, OptimizerKind};
pub use error::{HarnessError, Result};
pub use experiment::{run_config, run_experiment, Run, RunOutcome, StepRow};
