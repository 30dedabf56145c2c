//! Priors, benchmark simulators, summary statistics and the DeepSets
//! summary network.
//!
//! Every simulator is a pure function of the parameter vector and the RNG
//! it is handed, so a batch can be fanned out over workers as long as each
//! draw gets its own seeded stream.

mod dataset;
mod deepsets;
mod lotka_volterra;
mod mvg;
mod prior;
mod standardizer;
mod two_moons;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;

pub use dataset::{read_jsonl, write_jsonl, DatasetRecord};
pub use deepsets::DeepSets;
pub use lotka_volterra::{
    lv_gillespie_simulate, lv_summary_stats, LotkaVolterra, LvPath, LV_EPS_VAR, LV_GRID_POINTS, LV_MAX_EVENTS,
    LV_THETA_GT,
};
pub use mvg::{mvg_analytic_posterior, mvg_prior, mvg_simulate, mvg_summary_stats, MvgSimulator, MvgVariant, MVG_SIGMA};
pub use prior::{BoxUniformPrior, GaussianPrior, Prior};
pub use standardizer::{trim_count, PilotStandardizer, TRIM_FRACTION};
pub use two_moons::{two_moons_exact_posterior, two_moons_reference_sample, two_moons_simulate, TwoMoons};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("{what}: expected length {expected}, got {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("rejection sampler stalled: {accepted} accepted out of {tried} proposals")]
    ReferenceStall { accepted: usize, tried: u64 },
    #[error("standardizer {0}")]
    Standardizer(&'static str),
    #[error("dataset: {0}")]
    Dataset(String),
}

/// A stochastic simulator together with its prior.
pub trait Simulator: Send + Sync {
    fn name(&self) -> &str;
    fn theta_dim(&self) -> usize;
    /// Length of the vector returned by [`Simulator::simulate`].
    fn data_dim(&self) -> usize;
    fn prior(&self) -> &Prior;
    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Wraps a simulator and counts calls.
pub struct CountingSimulator<'a> {
    inner: &'a dyn Simulator,
    calls: AtomicU64,
}

impl<'a> CountingSimulator<'a> {
    pub fn new(inner: &'a dyn Simulator) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Simulator for CountingSimulator<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn theta_dim(&self) -> usize {
        self.inner.theta_dim()
    }

    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn prior(&self) -> &Prior {
        self.inner.prior()
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate(theta, rng)
    }
}
