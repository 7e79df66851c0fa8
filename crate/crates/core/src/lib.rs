//! Mixture-guided diffusion posterior sampling for Bayesian inverse problems
//! over analytic (Gaussian and Gaussian-mixture) diffusion priors.

pub mod error;
pub mod gaussian;
pub mod harness;
pub mod likelihoods;
pub mod metrics;
pub mod oracle;
pub mod priors;
pub mod sampler;
pub mod schedule;
pub mod vi;

pub use error::{Error, Result};
