//! Two-dimensional Gaussian with unknown mean and known covariance.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::metrics::GaussianSummary;

use super::{GaussianPrior, ModelError, Prior, Simulator};

/// Known observation covariance.
pub const MVG_SIGMA: [[f64; 2]; 2] = [[1.3862, 1.4245], [1.4245, 1.5986]];

const PRIOR_VAR: f64 = 5.0;

/// `N(0, 5 I)` on the mean.
pub fn mvg_prior() -> Prior {
    Prior::Gaussian(GaussianPrior::isotropic(vec![0.0, 0.0], PRIOR_VAR).expect("valid"))
}

fn sigma() -> Matrix2<f64> {
    Matrix2::new(MVG_SIGMA[0][0], MVG_SIGMA[0][1], MVG_SIGMA[1][0], MVG_SIGMA[1][1])
}

fn sigma_chol() -> Matrix2<f64> {
    sigma().cholesky().expect("positive definite").l()
}

/// `n_obs` i.i.d. draws from `N(mu, MVG_SIGMA)`.
pub fn mvg_simulate(mu: &[f64], n_obs: usize, rng: &mut dyn RngCore) -> Vec<[f64; 2]> {
    let l = sigma_chol();
    (0..n_obs)
        .map(|_| {
            let z0: f64 = StandardNormal.sample(rng);
            let z1: f64 = StandardNormal.sample(rng);
            [mu[0] + l[(0, 0)] * z0, mu[1] + l[(1, 0)] * z0 + l[(1, 1)] * z1]
        })
        .collect()
}

/// `[mean_1, mean_2, var_1, var_2, cov_12]`, unbiased normalization.
pub fn mvg_summary_stats(data: &[[f64; 2]]) -> Result<[f64; 5], ModelError> {
    let n = data.len();
    if n < 2 {
        return Err(ModelError::TooFewRows { need: 2, got: n });
    }
    let nf = n as f64;
    let m0 = data.iter().map(|r| r[0]).sum::<f64>() / nf;
    let m1 = data.iter().map(|r| r[1]).sum::<f64>() / nf;
    let (mut v0, mut v1, mut c) = (0.0, 0.0, 0.0);
    for r in data {
        let (a, b) = (r[0] - m0, r[1] - m1);
        v0 += a * a;
        v1 += b * b;
        c += a * b;
    }
    let k = 1.0 / (nf - 1.0);
    Ok([m0, m1, v0 * k, v1 * k, c * k])
}

/// Exact conjugate posterior of the mean given the observations. With no
/// observations this is the prior.
pub fn mvg_analytic_posterior(x_obs: &[[f64; 2]]) -> GaussianSummary {
    let n = x_obs.len() as f64;
    let prior_prec = DMatrix::<f64>::identity(2, 2) / PRIOR_VAR;
    let s = DMatrix::from_fn(2, 2, |i, j| MVG_SIGMA[i][j]);
    let s_inv = s.try_inverse().expect("invertible");
    let post_cov = (&prior_prec + &s_inv * n).try_inverse().expect("invertible");
    let mut xbar = DVector::zeros(2);
    for r in x_obs {
        xbar[0] += r[0] / n;
        xbar[1] += r[1] / n;
    }
    // prior mean is zero
    let mean = if x_obs.is_empty() {
        DVector::zeros(2)
    } else {
        &post_cov * (&s_inv * n) * xbar
    };
    // symmetrize against roundoff
    let cov = (&post_cov + post_cov.transpose()) * 0.5;
    GaussianSummary::new(mean, cov, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvgVariant {
    /// Five observations, flattened to a 10-vector.
    FiveObservations,
    /// Hundred observations reduced to their five sufficient statistics.
    SummaryStatistics,
    /// Five observations, flattened; a learned summary network is attached
    /// on the posterior side.
    LearnedSummaries,
}

impl MvgVariant {
    pub fn n_obs(self) -> usize {
        match self {
            MvgVariant::SummaryStatistics => 100,
            _ => 5,
        }
    }
}

pub struct MvgSimulator {
    variant: MvgVariant,
    prior: Prior,
}

impl MvgSimulator {
    pub fn new(variant: MvgVariant) -> Self {
        Self {
            variant,
            prior: mvg_prior(),
        }
    }

    pub fn variant(&self) -> MvgVariant {
        self.variant
    }

    /// Raw observations turned into the simulator's output vector.
    pub fn encode(&self, obs: &[[f64; 2]]) -> Vec<f64> {
        match self.variant {
            MvgVariant::SummaryStatistics => mvg_summary_stats(obs).expect("n >= 2").to_vec(),
            _ => obs.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }
}

impl Simulator for MvgSimulator {
    fn name(&self) -> &str {
        match self.variant {
            MvgVariant::FiveObservations => "mvg_five",
            MvgVariant::SummaryStatistics => "mvg_summary",
            MvgVariant::LearnedSummaries => "mvg_learned",
        }
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn data_dim(&self) -> usize {
        match self.variant {
            MvgVariant::SummaryStatistics => 5,
            _ => 10,
        }
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let obs = mvg_simulate(theta, self.variant.n_obs(), rng);
        self.encode(&obs)
    }
}
