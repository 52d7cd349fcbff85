//! Multi-sensor labeled multi-Bernoulli tracking with measurement-adaptive
//! birth.
//!
//! The crate is organized bottom-up: [`rfs_core`] holds the set and label
//! types, [`models`] the motion and sensor models, [`birth_likelihood`] the
//! birth pseudolikelihood estimator, [`adaptive_birth`] the tuple sampler and
//! birth construction, [`lmb_filter`] the particle LMB recursion,
//! [`scenario`] the simulator, [`metrics`] OSPA and OSPA(2), and [`harness`]
//! the experiment driver.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive_birth;
pub mod birth_likelihood;
pub mod error;
pub mod harness;
pub mod lmb_filter;
pub mod metrics;
pub mod models;
pub mod rfs_core;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
