//! Configuration-driven experiment runner: reproduces the benchmark
//! experiments, the lambda sweep, the calibration study and the sampling
//! speed comparison, and writes plot-ready CSV and JSONL artifacts.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod problem;
pub mod runner;

use std::path::PathBuf;

use snpla_core::autodiff::AutodiffError;
use snpla_core::flows::FlowError;
use snpla_core::inference::InferenceError;
use snpla_core::metrics::MetricError;
use snpla_core::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("missing checkpoint {0} (train it first, or pass --train-missing)")]
    MissingCheckpoint(PathBuf),
    #[error("simulator called {used} times against a budget of {budget}")]
    Budget { used: u64, budget: u64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<AutodiffError> for HarnessError {
    fn from(e: AutodiffError) -> Self {
        Self::Flow(FlowError::Autodiff(e))
    }
}
