//! Active estimation of causal quantities (CATE, ATE, ATT, ATE under
//! distribution shift) from a small labeled seed set and an unlabeled pool.
//!
//! The outcome surface is modelled with a Gaussian process over a product
//! kernel on (treatment, conditioning, adjustment) blocks. Target covariate
//! distributions enter through kernel mean embeddings, which turns every
//! causal quantity into a GP prediction at an "effective" input. Pool points
//! are then acquired to shrink the posterior covariance of those effective
//! predictions.

pub mod acquisition;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod embeddings;
pub mod error;
pub mod estimators;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
