//! Posterior-quality metrics: Gaussian KL, exact Wasserstein-1, negative
//! log-density at the truth, simulation-based calibration and two-moons
//! mode coverage.

mod assignment;
mod gaussian;
mod sbc;

pub use assignment::{assignment, wasserstein1, MAX_W1_SAMPLES};
pub use gaussian::{gaussian_kl, kl_to_analytic, neg_log_pdf_at_truth, GaussianSummary, KL_JITTER};
pub use sbc::{binomial_band, sbc, SbcResult, SBC_BAND_LEVEL, SBC_MIN_REPLICATES};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("covariance is singular even after jitter")]
    Singular,
    #[error("sample sets differ: {0}")]
    SizeMismatch(String),
    #[error("{n} samples exceed the assignment cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("SBC needs at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
    #[error("SBC aborted: {failed} of {total} replicates failed")]
    SbcAborted { failed: usize, total: usize },
}

/// Fractions of two-moons posterior samples on either side of the fold
/// line `theta_1 + theta_2 = 0`, whose two sides are exchanged by the
/// symmetry `(t1, t2) -> (-t2, -t1)`. Points on the line go by the sign of
/// `theta_1`.
pub fn mode_coverage(samples: &Tensor) -> (f64, f64) {
    let n = samples.rows();
    if n == 0 {
        return (0.0, 0.0);
    }
    let pos = samples
        .iter_rows()
        .filter(|r| {
            let s = r[0] + r[1];
            s > 0.0 || (s == 0.0 && r[0] > 0.0)
        })
        .count();
    let f = pos as f64 / n as f64;
    (f, (n - pos) as f64 / n as f64)
}

#[cfg(test)]
mod tests;
