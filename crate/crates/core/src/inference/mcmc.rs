use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::InferenceError;

/// Adaptive random-walk Metropolis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Initial proposal standard deviation per coordinate.
    pub init_scale: f64,
    pub target_accept: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            burn_in: 500,
            thinning: 10,
            init_scale: 0.1,
            target_accept: 0.234,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcOutput {
    /// `n x dim`, chains interleaved draw by draw.
    pub samples: Tensor,
    /// Post-burn-in acceptance rate per chain.
    pub acceptance: Vec<f64>,
    pub burn_in_acceptance: f64,
    /// Adapted proposal scale per chain.
    pub scales: Vec<f64>,
    /// Last state of each chain, for warm restarts.
    pub final_states: Tensor,
    pub n_evaluations: usize,
}

/// Cholesky factor of the pooled sample covariance of `states`, or `None`
/// when it is not usable.
fn proposal_factor(states: &[Vec<f64>], d: usize) -> Option<DMatrix<f64>> {
    let n = states.len();
    if n < 2 * d + 2 {
        return None;
    }
    let mut mean = DVector::zeros(d);
    for s in states {
        mean += DVector::from_column_slice(s);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in states {
        let z = DVector::from_column_slice(s) - &mean;
        cov += &z * z.transpose();
    }
    cov /= (n - 1) as f64;
    let jitter = 1e-10 * (cov.trace() / d as f64).max(1e-12);
    cov += DMatrix::identity(d, d) * jitter;
    cov.cholesky().map(|c| c.l())
}

/// Random-walk Metropolis on `log_density`, which maps a batch of states
/// (one row per chain) to their log-densities.
///
/// During burn-in each chain's step size follows a Robbins-Monro rule
/// towards `target_accept`, and the proposal shape is re-estimated from the
/// pooled burn-in states (scaled by `2.38^2 / d`). The kernel is frozen
/// afterwards, so kept draws come from a fixed Metropolis chain. `init` has
/// one row per chain or a single row shared by all.
pub fn mcmc_sample<F, R>(
    mut log_density: F,
    init: &Tensor,
    n: usize,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<McmcOutput, InferenceError>
where
    F: FnMut(&Tensor) -> Vec<f64>,
    R: Rng,
{
    let c = cfg.n_chains;
    let d = init.cols();
    if c == 0 || cfg.thinning == 0 || d == 0 {
        return Err(InferenceError::Config("n_chains, thinning and dim must be positive".into()));
    }
    if init.rows() != c && init.rows() != 1 {
        return Err(InferenceError::Config(format!(
            "{} initial states for {c} chains",
            init.rows()
        )));
    }
    let mut state: Vec<Vec<f64>> = (0..c)
        .map(|k| init.row_slice(if init.rows() == 1 { 0 } else { k }).to_vec())
        .collect();
    let flat = |s: &[Vec<f64>]| Tensor::new(s.len(), d, s.concat()).expect("shape");
    let mut logp = log_density(&flat(&state));
    let mut n_eval = c;
    for (k, lp) in logp.iter().enumerate() {
        if !lp.is_finite() {
            return Err(InferenceError::BadInit(state[k].clone()));
        }
    }

    let mut scales = vec![1.0f64; c];
    let mut shape = DMatrix::identity(d, d) * cfg.init_scale;
    let mut burn_states: Vec<Vec<f64>> = Vec::new();
    let per_chain = n.div_ceil(c);
    let total_steps = cfg.burn_in + per_chain * cfg.thinning;
    let mut kept: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(per_chain); c];
    let mut accepted_burn = 0usize;
    let mut accepted = vec![0usize; c];

    for t in 0..total_steps {
        let burning = t < cfg.burn_in;
        let mut prop = Vec::with_capacity(c);
        for k in 0..c {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &shape * z * scales[k];
            prop.push(state[k].iter().zip(step.iter()).map(|(a, b)| a + b).collect::<Vec<_>>());
        }
        let lp_prop = log_density(&flat(&prop));
        n_eval += c;
        for k in 0..c {
            let u: f64 = rng.random();
            let log_ratio = lp_prop[k] - logp[k];
            let accept = lp_prop[k].is_finite() && u.ln() < log_ratio;
            if accept {
                state[k] = std::mem::take(&mut prop[k]);
                logp[k] = lp_prop[k];
            }
            if burning {
                accepted_burn += accept as usize;
                let a = if lp_prop[k].is_finite() { log_ratio.min(0.0).exp() } else { 0.0 };
                let gain = 1.0 / ((t + 1) as f64).powf(0.6);
                scales[k] = (scales[k].ln() + gain * (a - cfg.target_accept)).exp();
            } else {
                accepted[k] += accept as usize;
                if (t - cfg.burn_in + 1) % cfg.thinning == 0 {
                    kept[k].push(state[k].clone());
                }
            }
        }
        if burning {
            burn_states.extend(state.iter().cloned());
            // re-estimate the proposal shape every 50 steps from step 100 on
            if t >= 100 && t % 50 == 0 {
                if let Some(l) = proposal_factor(&burn_states[burn_states.len() / 2..], d) {
                    let rescale = 2.38 / (d as f64).sqrt();
                    // carry the learned step size over to the new shape
                    let old = (shape.norm() / (d as f64).sqrt()).max(1e-300);
                    let new = l.norm() * rescale / (d as f64).sqrt();
                    for s in scales.iter_mut() {
                        *s *= old / new.max(1e-300);
                    }
                    shape = l * rescale;
                }
            }
            if t + 1 == cfg.burn_in {
                let rate = accepted_burn as f64 / (cfg.burn_in * c) as f64;
                if rate < 1e-3 {
                    return Err(InferenceError::McmcStalled {
                        rate,
                        proposals: cfg.burn_in * c,
                        scales,
                    });
                }
            }
        }
    }

    let mut data = Vec::with_capacity(n * d);
    'outer: for j in 0..per_chain {
        for chain in &kept {
            if data.len() == n * d {
                break 'outer;
            }
            data.extend_from_slice(&chain[j]);
        }
    }
    let post_steps = (per_chain * cfg.thinning).max(1) as f64;
    Ok(McmcOutput {
        samples: Tensor::new(n, d, data)?,
        acceptance: accepted.iter().map(|&a| a as f64 / post_steps).collect(),
        burn_in_acceptance: if cfg.burn_in > 0 {
            accepted_burn as f64 / (cfg.burn_in * c) as f64
        } else {
            f64::NAN
        },
        scales,
        final_states: flat(&state),
        n_evaluations: n_eval,
    })
}
