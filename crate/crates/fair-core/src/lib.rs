//! Invariance-regularized regression from heterogeneous environments.
//!
//! This crate implements a minimax estimation framework for recovering a
//! regression function that stays invariant across data-generating
//! environments, together with the machinery needed to benchmark and verify
//! it:
//!
//! - [`mlp`]: truncated fully-connected ReLU networks with exact reverse-mode
//!   gradients and an Adam optimizer.
//! - [`gate`]: stochastic per-covariate gates with a logistic relaxation of
//!   Bernoulli sampling and a geometric temperature schedule.
//! - [`objective`]: losses, the pooled multi-environment risk, the adversarial
//!   invariance penalty, its closed-form linear supremum, and exact
//!   population-level oracles on finite-support environments.
//! - [`trainer`]: the stochastic gradient descent-ascent loop that trains a
//!   gated predictor against per-environment discriminators.
//! - [`estimators`]: pooled least squares, gradient-trained and brute-force
//!   invariance estimators, variable selection, and refitting.
//! - [`scm`]: random-DAG structural causal model generators (continuous
//!   benchmarks and exact discrete models) with seeded simulation.
//! - [`ident`]: d-separation, pragmatic direct causes, minimal intervention
//!   sets, and brute-force identification oracles on discrete models.
//! - [`experiment`]: seeded benchmark runner with CSV/JSON emission.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod gate;
pub mod ident;
pub mod linalg;
pub mod mlp;
pub mod objective;
pub mod scm;
pub mod seed;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
