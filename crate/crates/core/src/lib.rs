//! Simulation-based inference with conditional normalizing flows.
//!
//! The crate learns a parameter posterior and a surrogate likelihood for
//! simulator-defined models by alternating forward-KL likelihood fits with
//! reverse-KL posterior updates, and ships the neural-likelihood (MCMC) and
//! SMC-ABC baselines, three benchmark simulators and the evaluation metrics
//! used to compare them.

pub mod autodiff;
pub mod checks;
pub mod flows;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod rng;
