//! Tabular and function-approximation DualDICE: estimating discounted
//! stationary distribution corrections from off-policy data, plus the
//! baselines and experiment harness used to compare against it.

// `!(x >= 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod model;
pub mod penalty;
pub mod tabular;
pub mod train;

pub use error::{DiceError, Result};
