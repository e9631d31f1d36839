//! Bayesian recursive estimation of model parameters with an extended Kalman
//! filter whose update follows the natural-gradient direction.
//!
//! The crate is organized by responsibility:
//!
//! * [`belief`]: Gaussian parameter posterior and SPD linear algebra.
//! * [`obsmodel`]: two-tower contrastive model with low-rank adapters, its
//!   Jacobian and the contrastive loss.
//! * [`robust`]: residual statistics, adaptive observation noise and the
//!   Mahalanobis-based regulation factor.
//! * [`kalman`]: the optimizer loop.
//! * [`ngd`]: Fisher-information and natural-gradient oracles used to verify
//!   the filter.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod error;
pub mod kalman;
pub mod ngd;
pub mod obsmodel;
pub mod robust;

pub use belief::{init_belief, spd_solve, woodbury_posterior_cov, Backend, Covariance, GaussianBelief, ProcessNoise};
pub use error::{Error, Result};
pub use kalman::{gain, predict, update, KalmanOptimizer, StepReport};
pub use obsmodel::{Minibatch, Provenance, TwoTowerModel};
pub use robust::{LambdaScope, NoiseState, RhatMethod, RobustConfig};
