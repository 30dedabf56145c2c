use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

use super::MetricError;

/// Diagonal jitter added once when a covariance fails to factorize.
pub const KL_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_samples: usize,
}

fn factor(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, MetricError> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c);
    }
    let d = cov.nrows();
    (cov + DMatrix::identity(d, d) * KL_JITTER)
        .cholesky()
        .ok_or(MetricError::Singular)
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl GaussianSummary {
    /// Symmetrizes `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n_samples: usize) -> Self {
        let cov = (&cov + cov.transpose()) * 0.5;
        Self { mean, cov, n_samples }
    }

    /// Sample mean and unbiased covariance. Needs `n >= d + 2`.
    pub fn from_samples(samples: &Tensor) -> Result<Self, MetricError> {
        let (n, d) = samples.shape();
        if n < d + 2 {
            return Err(MetricError::TooFewSamples { need: d + 2, got: n });
        }
        let mut mean = DVector::zeros(d);
        for row in samples.iter_rows() {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for row in samples.iter_rows() {
            for i in 0..d {
                let a = row[i] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += a * (row[j] - mean[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
        Ok(Self::new(mean, cov, n))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `n` draws as an `n x d` tensor.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Tensor, MetricError> {
        let c = factor(&self.cov)?;
        let l = c.l();
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = &self.mean + &l * z;
            out.extend(x.iter());
        }
        Ok(Tensor::new(n, d, out).expect("shape"))
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64, MetricError> {
        let c = factor(&self.cov)?;
        let diff = DVector::from_fn(self.dim(), |i, _| x[i] - self.mean[i]);
        let z = c.l_dirty().solve_lower_triangular(&diff).ok_or(MetricError::Singular)?;
        Ok(-0.5 * z.norm_squared() - 0.5 * log_det(&c) - 0.5 * self.dim() as f64 * (2.0 * PI).ln())
    }
}

/// `KL(p || q)` between Gaussians:
/// `(log det S_q - log det S_p + tr(S_q^-1 S_p) - d + dm' S_q^-1 dm) / 2`.
pub fn gaussian_kl(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64, MetricError> {
    let d = p.dim();
    if q.dim() != d {
        return Err(MetricError::SizeMismatch(format!("dimensions {d} and {}", q.dim())));
    }
    let cp = factor(&p.cov)?;
    let cq = factor(&q.cov)?;
    let q_inv = cq.inverse();
    let dm = &p.mean - &q.mean;
    let trace = (&q_inv * &p.cov).trace();
    let quad = (dm.transpose() * &q_inv * &dm)[(0, 0)];
    let kl = 0.5 * (log_det(&cq) - log_det(&cp) + trace - d as f64 + quad);
    Ok(kl.max(0.0))
}

/// `KL(analytic || Gaussian fit of samples)`.
pub fn kl_to_analytic(samples: &Tensor, analytic: &GaussianSummary) -> Result<f64, MetricError> {
    let fit = GaussianSummary::from_samples(samples)?;
    gaussian_kl(analytic, &fit)
}

/// `-log N(truth; m, S)` with `(m, S)` fitted to the samples.
pub fn neg_log_pdf_at_truth(samples: &Tensor, truth: &[f64]) -> Result<f64, MetricError> {
    let fit = GaussianSummary::from_samples(samples)?;
    if truth.len() != fit.dim() {
        return Err(MetricError::SizeMismatch(format!(
            "truth has {} coordinates, samples {}",
            truth.len(),
            fit.dim()
        )));
    }
    Ok(-fit.log_pdf(truth)?)
}
