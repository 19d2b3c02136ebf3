//! Hybrid Poisson / multi-Bernoulli multi-target tracking with an explicit
//! intensity for targets that have never been detected.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod divergence;
pub mod error;
pub mod experiments;
pub mod intensity;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod simulator;
pub mod tracker;

pub use error::{Error, Result};
