//! Bottom-up meta-policy search on a synthetic contextual kick task.
//!
//! Pipeline: train one PPO expert per meta-training target distance, roll out
//! a trajectory from each, tag every step with its target and fit a single
//! contextual policy by behavior cloning, then adapt to unseen targets by
//! evaluating nearby contexts and keeping the best one (policy filtering).

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod meta;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rl;
pub mod seed;

pub use error::{Error, Result};
