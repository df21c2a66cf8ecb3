//! Cross Q-learning research kit.
//!
//! K value estimators per learner, each trained against a TD target that a
//! randomly chosen peer evaluates. The crate covers the estimator theory
//! (single, double and cross maximum-expected-value estimators), tabular
//! learning on finite MDPs with a value-iteration oracle, deep ensembles on a
//! 3-action CartPole, and a seeded experiment harness that writes CSV series.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub mod agents;
pub mod envs;
pub mod estimators;
pub mod harness;
pub mod tabular;
pub mod util;
