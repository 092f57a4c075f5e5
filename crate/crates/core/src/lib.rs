//! Training small fully recurrent networks by integrating the quotient
//! gradient system `x' = -Dh(x)^T h(x)` built from a training set.
//!
//! The crate is organised bottom-up:
//!
//! - [`rnn`]: the network, its flat parameter vector and sequence evaluation.
//! - [`residual`]: residual systems `h(x)`, Jacobians and finite-difference oracles.
//! - [`qgs`]: forward/backward trajectory integration, equilibrium
//!   classification, escapes and the multi-minimum search.
//! - [`stability`]: numerical checks of the Lyapunov descent, decay-rate,
//!   perturbation and norm-bound inequalities.
//! - [`baselines`]: steepest-descent backpropagation and a genetic algorithm.
//! - [`benchmarks`]: the two identification plants, dataset generation and metrics.
//! - [`run`]: configuration, run reports and the end-to-end training pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod benchmarks;
pub mod dataset;
pub mod error;
pub mod fsio;
pub mod qgs;
pub mod residual;
pub mod rnn;
pub mod run;
pub mod stability;

pub use dataset::{Dataset, DatasetMeta, Split};
pub use error::{QgsError, Result};
pub use residual::{FnResidual, Residual, ResidualSystem, SensitivityMode, SlackAugmentedCsp};
pub use rnn::{NetworkShape, ParamVector};
