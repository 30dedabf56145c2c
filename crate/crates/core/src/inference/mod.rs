//! Sequential inference loops: SNPLA, the neural-likelihood baseline with
//! MCMC, SMC-ABC, and the shared density-model trainer.

mod mcmc;
mod proposal;
mod smcabc;
mod snl;
mod snpla;
mod trainer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use crate::flows::FlowError;
use crate::models::ModelError;

pub use mcmc::{mcmc_sample, McmcConfig, McmcOutput};
pub use proposal::{mixture_weight, proposal_mixture_sample, MixtureDraw};
pub use smcabc::{smcabc_run, AbcGeneration, AbcStop, SmcAbcConfig, SmcAbcOutput};
pub use snl::{snl_log_target, snl_run, SnlConfig, SnlOutput};
pub use snpla::{snpla_run, SnplaConfig, SnplaOutput};
pub use trainer::{train_density_model, TrainConfig, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has {got} pairs, need at least {need}")]
    TooFewPairs { need: usize, got: usize },
    #[error("observation has {got} entries, the simulator produces {expected}")]
    ObservationDim { expected: usize, got: usize },
    #[error("log-density is not finite at initial state {0:?}")]
    BadInit(Vec<f64>),
    #[error("MCMC burn-in stalled: acceptance {rate:.2e} over {proposals} proposals (scales {scales:?})")]
    McmcStalled { rate: f64, proposals: usize, scales: Vec<f64> },
}

impl From<AutodiffError> for InferenceError {
    fn from(e: AutodiffError) -> Self {
        Self::Flow(FlowError::Autodiff(e))
    }
}

/// True for the failures that count as a numerical blow-up (NaN/inf) rather
/// than a programming or data error.
pub(crate) fn is_non_finite(e: &FlowError) -> bool {
    matches!(
        e,
        FlowError::NonFinite { .. } | FlowError::Autodiff(AutodiffError::NonFiniteGradient { .. })
    )
}

/// Network sizes shared by the likelihood and posterior flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    pub n_layers: usize,
    pub hidden: Vec<usize>,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            n_layers: 5,
            hidden: vec![50, 50],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Ok,
    /// A trainer hit a non-finite loss and fell back to its best weights,
    /// or step 2 needed its retry.
    Degraded,
    /// Step 2 failed twice; the previous posterior was kept.
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTimings {
    pub simulate: f64,
    pub train_like: f64,
    pub train_post: f64,
    pub sample: f64,
}

/// Everything recorded about one round. `samples` holds the posterior
/// draws used for evaluation and is written separately as CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub alpha: f64,
    pub dataset_size: usize,
    pub like_train_loss: Vec<f64>,
    pub like_val_loss: Vec<f64>,
    pub post_loss: Vec<f64>,
    pub post_val_loss: Vec<f64>,
    pub status: RoundStatus,
    pub timings: RoundTimings,
    #[serde(skip)]
    pub samples: Tensor,
    pub metrics: BTreeMap<String, f64>,
}

impl RoundRecord {
    pub(crate) fn new(round: usize, alpha: f64) -> Self {
        Self {
            round,
            alpha,
            dataset_size: 0,
            like_train_loss: Vec::new(),
            like_val_loss: Vec::new(),
            post_loss: Vec::new(),
            post_val_loss: Vec::new(),
            status: RoundStatus::Ok,
            timings: RoundTimings::default(),
            samples: Tensor::zeros(0, 0),
            metrics: BTreeMap::new(),
        }
    }

    pub(crate) fn degrade(&mut self) {
        if self.status == RoundStatus::Ok {
            self.status = RoundStatus::Degraded;
        }
    }
}
