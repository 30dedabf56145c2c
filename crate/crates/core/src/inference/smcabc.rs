use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::models::Simulator;

use super::InferenceError;

/// Population Monte Carlo ABC settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcAbcConfig {
    pub n_particles: usize,
    /// Total simulator calls allowed, generation 0 included.
    pub max_sims: u64,
    /// Generation 0 simulates `n_particles / initial_quantile` prior draws
    /// and keeps the closest `n_particles`.
    pub initial_quantile: f64,
    /// Quantile of the previous generation's distances used as the next
    /// tolerance.
    pub eps_quantile: f64,
    /// Perturbation covariance multiplier on the weighted particle covariance.
    pub kernel_scale: f64,
    /// Stop when the tolerance shrinks by less than this fraction.
    pub min_eps_reduction: f64,
}

impl SmcAbcConfig {
    pub fn new(n_particles: usize, max_sims: u64) -> Self {
        Self {
            n_particles,
            max_sims,
            initial_quantile: 0.5,
            eps_quantile: 0.5,
            kernel_scale: 2.0,
            min_eps_reduction: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbcGeneration {
    pub particles: Tensor,
    /// Normalized importance weights.
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    pub epsilon: f64,
    /// Simulator calls used up to and including this generation.
    pub n_simulations: u64,
}

impl AbcGeneration {
    /// `n` draws with replacement according to the weights.
    pub fn resample(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let w = WeightedIndex::new(&self.weights).expect("weights are positive and finite");
        let idx: Vec<usize> = (0..n).map(|_| w.sample(rng)).collect();
        self.particles.select_rows(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbcStop {
    Budget,
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmcAbcOutput {
    pub generations: Vec<AbcGeneration>,
    /// Per-coordinate scale of the distance (prior-predictive std).
    pub data_scale: Vec<f64>,
    pub n_simulations: u64,
    pub stop: AbcStop,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn distance(x: &[f64], x_obs: &[f64], scale: &[f64]) -> f64 {
    x.iter()
        .zip(x_obs)
        .zip(scale)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Sequential Monte Carlo ABC (population Monte Carlo).
///
/// Distances are Euclidean after dividing every coordinate by its
/// generation-0 prior-predictive standard deviation. A generation that
/// cannot finish within `max_sims` is discarded.
pub fn smcabc_run<R: Rng>(
    simulator: &dyn Simulator,
    x_obs: &[f64],
    cfg: &SmcAbcConfig,
    rng: &mut R,
) -> Result<SmcAbcOutput, InferenceError> {
    let prior = simulator.prior();
    let d = prior.dim();
    if x_obs.len() != simulator.data_dim() {
        return Err(InferenceError::ObservationDim {
            expected: simulator.data_dim(),
            got: x_obs.len(),
        });
    }
    if cfg.n_particles < d + 2 || !(cfg.initial_quantile > 0.0 && cfg.initial_quantile <= 1.0) {
        return Err(InferenceError::Config(format!(
            "need at least {} particles and initial_quantile in (0, 1]",
            d + 2
        )));
    }
    let n0 = (cfg.n_particles as f64 / cfg.initial_quantile).ceil() as usize;
    if n0 as u64 > cfg.max_sims {
        return Err(InferenceError::Config(format!(
            "generation 0 needs {n0} simulations, budget is {}",
            cfg.max_sims
        )));
    }

    // generation 0: rejection from the prior at a distance quantile
    let mut thetas = Vec::with_capacity(n0);
    let mut sims = Vec::with_capacity(n0);
    for _ in 0..n0 {
        let th = prior.sample(rng);
        sims.push(simulator.simulate(&th, rng));
        thetas.push(th);
    }
    let mut sims_used = n0 as u64;
    let p = x_obs.len();
    let data_scale: Vec<f64> = (0..p)
        .map(|j| {
            let m = sims.iter().map(|s| s[j]).sum::<f64>() / n0 as f64;
            let v = sims.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / (n0 as f64 - 1.0).max(1.0);
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut dist: Vec<(f64, usize)> = sims
        .iter()
        .enumerate()
        .map(|(k, s)| (distance(s, x_obs, &data_scale), k))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    dist.truncate(cfg.n_particles);
    let keep: Vec<usize> = dist.iter().map(|&(_, k)| k).collect();
    let gen0 = AbcGeneration {
        particles: Tensor::new(cfg.n_particles, d, keep.iter().flat_map(|&k| thetas[k].clone()).collect())?,
        weights: vec![1.0 / cfg.n_particles as f64; cfg.n_particles],
        distances: dist.iter().map(|&(v, _)| v).collect(),
        epsilon: dist.last().map_or(0.0, |&(v, _)| v),
        n_simulations: sims_used,
    };
    let mut generations = vec![gen0];

    loop {
        let prev = generations.last().expect("non-empty");
        let mut sorted = prev.distances.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let eps = quantile(&sorted, cfg.eps_quantile);
        if prev.epsilon - eps < cfg.min_eps_reduction * prev.epsilon {
            return Ok(SmcAbcOutput {
                generations,
                data_scale,
                n_simulations: sims_used,
                stop: AbcStop::Stalled,
            });
        }

        // Gaussian kernel with kernel_scale x the weighted covariance
        let mean = prev
            .particles
            .iter_rows()
            .zip(&prev.weights)
            .fold(DVector::zeros(d), |acc, (r, w)| acc + DVector::from_column_slice(r) * *w);
        let mut cov = DMatrix::zeros(d, d);
        for (r, w) in prev.particles.iter_rows().zip(&prev.weights) {
            let z = DVector::from_column_slice(r) - &mean;
            cov += &z * z.transpose() * *w;
        }
        cov *= cfg.kernel_scale;
        cov += DMatrix::identity(d, d) * (1e-12 * cov.trace().max(1e-12));
        let chol = cov.clone().cholesky().ok_or_else(|| {
            InferenceError::Config("particle covariance is not positive definite".into())
        })?;
        let l = chol.l();
        let prec = chol.inverse();
        let picker = WeightedIndex::new(&prev.weights).expect("valid weights");

        let mut particles = Vec::with_capacity(cfg.n_particles * d);
        let mut distances = Vec::with_capacity(cfg.n_particles);
        while distances.len() < cfg.n_particles {
            let j = picker.sample(rng);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &l * z;
            let cand: Vec<f64> = prev.particles.row_slice(j).iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if !prior.log_density(&cand).is_finite() {
                continue;
            }
            if sims_used >= cfg.max_sims {
                return Ok(SmcAbcOutput {
                    generations,
                    data_scale,
                    n_simulations: sims_used,
                    stop: AbcStop::Budget,
                });
            }
            let x = simulator.simulate(&cand, rng);
            sims_used += 1;
            let dd = distance(&x, x_obs, &data_scale);
            if dd <= eps {
                particles.extend(cand);
                distances.push(dd);
            }
        }

        // w_i ∝ prior(theta_i) / sum_j w_j K(theta_i | theta_j), in log space
        let particles = Tensor::new(cfg.n_particles, d, particles)?;
        let log_w: Vec<f64> = particles
            .iter_rows()
            .map(|r| {
                let x = DVector::from_column_slice(r);
                let terms: Vec<f64> = prev
                    .particles
                    .iter_rows()
                    .zip(&prev.weights)
                    .map(|(q, w)| {
                        let z = &x - DVector::from_column_slice(q);
                        w.ln() - 0.5 * (z.transpose() * &prec * &z)[(0, 0)]
                    })
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
                prior.log_density(r) - lse
            })
            .collect();
        let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        generations.push(AbcGeneration {
            particles,
            weights: w.iter().map(|v| v / total).collect(),
            distances,
            epsilon: eps,
            n_simulations: sims_used,
        });
    }
}
