use rand::RngCore;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::autodiff::Tensor;
use crate::models::Simulator;

use super::MetricError;

pub const SBC_MIN_REPLICATES: usize = 20;
/// Central probability of the per-bin acceptance band.
pub const SBC_BAND_LEVEL: f64 = 0.99;
const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SbcResult {
    /// One histogram of `L + 1` bins per parameter.
    pub histograms: Vec<Vec<u64>>,
    pub replicates: usize,
    pub skipped: usize,
    pub posterior_draws: usize,
    pub chi2: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Inclusive count band per bin under uniform ranks.
    pub band: (u64, u64),
}

impl SbcResult {
    /// Bins of parameter `j` whose count lies inside the band.
    pub fn bins_in_band(&self, j: usize) -> usize {
        let (lo, hi) = self.band;
        self.histograms[j].iter().filter(|&&c| c >= lo && c <= hi).count()
    }
}

/// Central `level` interval of `Binomial(k, p)`: the smallest count with CDF
/// at least `(1 - level) / 2` and the smallest with CDF at least
/// `(1 + level) / 2`.
pub fn binomial_band(k: u64, p: f64, level: f64) -> (u64, u64) {
    let dist = Binomial::new(p, k).expect("valid binomial");
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = (1.0 + level) / 2.0;
    let mut lo = None;
    let mut hi = k;
    for c in 0..=k {
        let f = dist.cdf(c);
        if lo.is_none() && f >= lo_q {
            lo = Some(c);
        }
        if f >= hi_q {
            hi = c;
            break;
        }
    }
    (lo.unwrap_or(0), hi)
}

/// Simulation-based calibration.
///
/// For each replicate: draw `theta ~ prior`, simulate `x`, ask `runner` for
/// `l` posterior draws given `x`, and record per coordinate how many draws
/// fall below `theta` (a rank in `0..=l`). A failing runner skips the
/// replicate; more than 20% failures abort.
pub fn sbc<F>(
    simulator: &dyn Simulator,
    runner: F,
    k: usize,
    l: usize,
    rng: &mut dyn RngCore,
) -> Result<SbcResult, MetricError>
where
    F: Fn(&[f64], usize, &mut dyn RngCore) -> Result<Tensor, String>,
{
    if k < SBC_MIN_REPLICATES {
        return Err(MetricError::TooFewReplicates {
            min: SBC_MIN_REPLICATES,
            got: k,
        });
    }
    let d = simulator.theta_dim();
    let mut histograms = vec![vec![0u64; l + 1]; d];
    let mut skipped = 0;
    for _ in 0..k {
        let theta = simulator.prior().sample(rng);
        let x = simulator.simulate(&theta, rng);
        match runner(&x, l, rng) {
            Ok(draws) if draws.rows() == l && draws.cols() == d => {
                for j in 0..d {
                    let rank = draws.iter_rows().filter(|r| r[j] < theta[j]).count();
                    histograms[j][rank] += 1;
                }
            }
            _ => {
                skipped += 1;
                if skipped as f64 > MAX_FAILURE_FRACTION * k as f64 {
                    return Err(MetricError::SbcAborted { failed: skipped, total: k });
                }
            }
        }
    }
    let used = (k - skipped) as f64;
    let expected = used / (l + 1) as f64;
    let chi = ChiSquared::new(l as f64).expect("l >= 1");
    let mut chi2 = Vec::with_capacity(d);
    let mut p_values = Vec::with_capacity(d);
    for h in &histograms {
        let stat: f64 = h.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        chi2.push(stat);
        p_values.push(1.0 - chi.cdf(stat));
    }
    Ok(SbcResult {
        histograms,
        replicates: k,
        skipped,
        posterior_draws: l,
        chi2,
        p_values,
        band: binomial_band((k - skipped) as u64, 1.0 / (l + 1) as f64, SBC_BAND_LEVEL),
    })
}
