// Domain checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod explainers;
pub mod importance;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensorgrad;
pub mod trainer;
pub mod vmask;

pub use error::{Error, Result};
