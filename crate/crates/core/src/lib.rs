//! Bayesian spatial predictive synthesis.

pub mod agents;
pub mod artifact;
pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod logistic;
pub mod predict;
pub mod spatial;
pub mod stats;
pub mod vb;

pub use error::{Error, Result};
