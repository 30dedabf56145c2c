use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::flows::{BoxBounds, FlowError, LogDensityTerm};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxUniformPrior {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxUniformPrior {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        BoxBounds::new(lower.clone(), upper.clone()).map_err(|e| ModelError::InvalidPrior(e.to_string()))?;
        Ok(Self { lower, upper })
    }

    pub fn log_volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| (b - a).ln()).sum()
    }

    /// Open box; points on the boundary count as inside for density
    /// purposes (a set of measure zero), but not for the flow's box.
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&t, (&a, &b))| t >= a && t <= b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    /// Row-major, symmetric positive definite.
    pub cov: Vec<Vec<f64>>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let p = Self { mean, cov };
        p.cholesky()?;
        Ok(p)
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self, ModelError> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect())
            .collect();
        Self::new(mean, cov)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |i, j| self.cov[i][j])
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, ModelError> {
        let d = self.mean.len();
        if self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(ModelError::InvalidPrior("covariance shape does not match mean".into()));
        }
        let m = self.cov_matrix();
        if (&m - m.transpose()).abs().max() > 1e-12 {
            return Err(ModelError::InvalidPrior("covariance is not symmetric".into()));
        }
        m.cholesky()
            .ok_or_else(|| ModelError::InvalidPrior("covariance is not positive definite".into()))
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.cholesky().expect("validated").inverse()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.cholesky().expect("validated");
        2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Parameter prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    BoxUniform(BoxUniformPrior),
    Gaussian(GaussianPrior),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::BoxUniform(p) => p.lower.len(),
            Prior::Gaussian(p) => p.mean.len(),
        }
    }

    /// The box for a sigmoid output layer, if the prior has bounded support.
    pub fn bounds(&self) -> Option<BoxBounds> {
        match self {
            Prior::BoxUniform(p) => Some(BoxBounds::new(p.lower.clone(), p.upper.clone()).expect("validated")),
            Prior::Gaussian(_) => None,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Prior::BoxUniform(p) => p.lower.iter().zip(&p.upper).map(|(a, b)| 0.5 * (a + b)).collect(),
            Prior::Gaussian(p) => p.mean.clone(),
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            Prior::BoxUniform(p) => p
                .lower
                .iter()
                .zip(&p.upper)
                .map(|(&a, &b)| {
                    let u: f64 = rand::Rng::random(rng);
                    a + (b - a) * u
                })
                .collect(),
            Prior::Gaussian(p) => {
                let l = p.cholesky().expect("validated").l();
                let z = DVector::from_fn(p.mean.len(), |_, _| StandardNormal.sample(rng));
                let x = l * z;
                x.iter().zip(&p.mean).map(|(v, m)| v + m).collect()
            }
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.sample(rng));
        }
        Tensor::new(n, d, data).expect("shape")
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            Prior::BoxUniform(p) => {
                if p.contains(theta) {
                    -p.log_volume()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Gaussian(p) => {
                let d = p.mean.len();
                let c = DVector::from_fn(d, |i, _| theta[i] - p.mean[i]);
                let q = (c.transpose() * p.precision() * &c)[(0, 0)];
                -0.5 * q - 0.5 * p.log_det() - 0.5 * d as f64 * (2.0 * PI).ln()
            }
        }
    }
}

impl LogDensityTerm for Prior {
    /// Box priors contribute a constant (no gradient); rows outside the box
    /// get `-inf`. Gaussian priors are differentiable.
    fn log_density(&self, g: &mut Graph, theta: Var) -> Result<Var, FlowError> {
        let vals = g.value(theta).clone();
        match self {
            Prior::BoxUniform(_) => {
                let col: Vec<f64> = vals.iter_rows().map(|r| Prior::log_density(self, r)).collect();
                Ok(g.constant(Tensor::column(&col)))
            }
            Prior::Gaussian(p) => {
                let d = p.mean.len();
                let prec = p.precision();
                let prec = Tensor::new(d, d, (0..d * d).map(|k| prec[(k / d, k % d)]).collect())?;
                let m = g.constant(Tensor::row(&p.mean));
                let c = g.sub(theta, m)?;
                let pm = g.constant(prec);
                let pc = g.matmul(c, pm)?;
                let quad = g.mul(pc, c)?;
                let rs = g.row_sum(quad);
                let half = g.scale(rs, -0.5);
                Ok(g.add_scalar(half, -0.5 * p.log_det() - 0.5 * d as f64 * (2.0 * PI).ln()))
            }
        }
    }
}
