//! Conditional masked autoregressive flows.
//!
//! A [`ConditionalFlow`] maps standard-normal noise `u` to `x = T(u; context)`
//! through affine autoregressive layers, coordinate reversals and an
//! optional sigmoid box. Density evaluation runs the inverse direction in a
//! single pass per layer; sampling needs `dim` passes per affine layer.
//!
//! Every pass is built on an autodiff [`Graph`], so densities are
//! differentiable w.r.t. inputs, context and weights, and samples are
//! reparameterized.

mod checkpoint;
mod loss;
mod made;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};

pub use checkpoint::Checkpoint;
pub use loss::{forward_kl_loss, reverse_kl_loss, ConditionalTerm, LogDensityTerm};
pub use made::MadeConditioner;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid box in coordinate {dim}: lower {lower} must be below upper {upper}")]
    InvalidBox { dim: usize, lower: f64, upper: f64 },
    #[error("point outside the open box (row {row}, coordinate {dim})")]
    OutOfSupport { row: usize, dim: usize },
    #[error("non-finite output in flow layer {layer}")]
    NonFinite { layer: usize },
    #[error("{what}: expected width {expected}, got {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Open box `(lower, upper)` used by the sigmoid output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, FlowError> {
        if lower.len() != upper.len() {
            return Err(FlowError::DimMismatch {
                what: "box upper bound",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        for (j, (&a, &b)) in lower.iter().zip(&upper).enumerate() {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(FlowError::InvalidBox { dim: j, lower: a, upper: b });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self, FlowError> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Strictly inside on every coordinate.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&a, &b))| v > a && v < b)
    }

    fn log_widths(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| (b - a).ln()).sum()
    }
}

/// Architecture descriptor; also stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub context_dim: usize,
    pub n_layers: usize,
    pub hidden: Vec<usize>,
    pub log_scale_clamp: f64,
    pub bounds: Option<BoxBounds>,
    /// Fixed z-scoring of the context before it reaches any conditioner.
    #[serde(default)]
    pub context_norm: Option<Standardization>,
    /// Fixed output affine map `x = z * std + mean`; unbounded flows only.
    #[serde(default)]
    pub target_norm: Option<Standardization>,
}

/// Per-column location and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Column means and (n-1) standard deviations; a column with zero spread
    /// gets scale 1.
    pub fn from_rows(x: &Tensor) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        for r in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in x.iter_rows() {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2) / (n as f64 - 1.0).max(1.0);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = v.sqrt();
                if s.is_finite() && s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self, what: &'static str, expected: usize) -> Result<(), FlowError> {
        if self.mean.len() != expected || self.std.len() != expected {
            return Err(FlowError::DimMismatch {
                what,
                expected,
                found: self.mean.len(),
            });
        }
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(FlowError::Config(format!("{what}: scales must be positive and finite")));
        }
        Ok(())
    }
}

impl FlowConfig {
    /// Five affine layers, two hidden layers of 50 units.
    pub fn new(dim: usize, context_dim: usize) -> Self {
        Self {
            dim,
            context_dim,
            n_layers: 5,
            hidden: vec![50, 50],
            log_scale_clamp: 7.0,
            bounds: None,
            context_norm: None,
            target_norm: None,
        }
    }

    pub fn with_layers(mut self, n_layers: usize, hidden: Vec<usize>) -> Self {
        self.n_layers = n_layers;
        self.hidden = hidden;
        self
    }

    pub fn with_bounds(mut self, bounds: BoxBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn with_context_norm(mut self, s: Standardization) -> Self {
        self.context_norm = Some(s);
        self
    }

    pub fn with_target_norm(mut self, s: Standardization) -> Self {
        self.target_norm = Some(s);
        self
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    AffineAutoregressive(MadeConditioner),
    /// Output column `j` takes input column `perm[j]`.
    Permutation {
        perm: Arc<Vec<usize>>,
        inverse: Arc<Vec<usize>>,
    },
    SigmoidBox(BoxBounds),
    /// `x = z * std + mean`, columnwise.
    Affine(Standardization),
}

#[derive(Clone, Debug)]
pub struct ConditionalFlow {
    pub(crate) config: FlowConfig,
    pub(crate) layers: Vec<FlowLayer>,
    pub(crate) params: ParamStore,
}

fn check_finite(g: &Graph, v: Var, layer: usize) -> Result<(), FlowError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(FlowError::NonFinite { layer })
    }
}

/// `log N(u; 0, I)` per row of a tensor.
pub fn std_normal_log_density(row: &[f64]) -> f64 {
    -0.5 * row.iter().map(|v| v * v).sum::<f64>() - 0.5 * row.len() as f64 * (2.0 * PI).ln()
}

fn base_log_prob(g: &mut Graph, u: Var, dim: usize) -> Var {
    let sq = g.square(u);
    let rs = g.row_sum(sq);
    let half = g.scale(rs, -0.5);
    g.add_scalar(half, -0.5 * dim as f64 * (2.0 * PI).ln())
}

impl ConditionalFlow {
    pub fn new(config: FlowConfig, rng: &mut impl Rng) -> Result<Self, FlowError> {
        if config.dim == 0 {
            return Err(FlowError::Config("dimension must be at least 1".into()));
        }
        if config.n_layers == 0 {
            return Err(FlowError::Config("need at least one affine layer".into()));
        }
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(FlowError::Config("hidden widths must be non-empty and positive".into()));
        }
        if !(config.log_scale_clamp > 0.0) {
            return Err(FlowError::Config("log-scale clamp must be positive".into()));
        }
        if let Some(b) = &config.bounds {
            // revalidate: the descriptor may come from a file
            let b = BoxBounds::new(b.lower.clone(), b.upper.clone())?;
            if b.dim() != config.dim {
                return Err(FlowError::DimMismatch {
                    what: "box",
                    expected: config.dim,
                    found: b.dim(),
                });
            }
        }
        if let Some(s) = &config.context_norm {
            s.validate("context standardization", config.context_dim)?;
        }
        if let Some(s) = &config.target_norm {
            s.validate("target standardization", config.dim)?;
            if config.bounds.is_some() {
                return Err(FlowError::Config("a boxed flow cannot also standardize its output".into()));
            }
        }
        let d = config.dim;
        let perm: Arc<Vec<usize>> = Arc::new((0..d).rev().collect());
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for k in 0..config.n_layers {
            if k > 0 {
                layers.push(FlowLayer::Permutation {
                    perm: perm.clone(),
                    inverse: perm.clone(),
                });
            }
            let made = MadeConditioner::new(
                &mut params,
                &format!("maf{k}"),
                d,
                config.context_dim,
                &config.hidden,
                config.log_scale_clamp,
                rng,
            )?;
            layers.push(FlowLayer::AffineAutoregressive(made));
        }
        if let Some(b) = &config.bounds {
            layers.push(FlowLayer::SigmoidBox(b.clone()));
        }
        if let Some(s) = &config.target_norm {
            layers.push(FlowLayer::Affine(s.clone()));
        }
        Ok(Self { config, layers, params })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    pub fn bounds(&self) -> Option<&BoxBounds> {
        self.config.bounds.as_ref()
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adds uniform noise in `(-scale, scale)` to every weight. Used to get
    /// away from the identity initialization in tests and diagnostics.
    pub fn perturb(&mut self, rng: &mut impl Rng, scale: f64) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    fn check_context(&self, g: &Graph, context: Option<Var>) -> Result<(), FlowError> {
        let found = context.map_or(0, |c| g.value(c).cols());
        if found != self.config.context_dim {
            return Err(FlowError::DimMismatch {
                what: "context",
                expected: self.config.context_dim,
                found,
            });
        }
        Ok(())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(), FlowError> {
        let (rows, cols) = g.value(x).shape();
        if cols != self.config.dim {
            return Err(FlowError::DimMismatch {
                what: "flow input",
                expected: self.config.dim,
                found: cols,
            });
        }
        if rows == 0 {
            return Err(FlowError::EmptyBatch);
        }
        Ok(())
    }

    fn normalize_context(&self, g: &mut Graph, context: Option<Var>) -> Result<Option<Var>, FlowError> {
        match (&self.config.context_norm, context) {
            (Some(s), Some(c)) => {
                let m = g.constant(Tensor::row(&s.mean));
                let inv: Vec<f64> = s.std.iter().map(|v| 1.0 / v).collect();
                let inv = g.constant(Tensor::row(&inv));
                let centred = g.sub(c, m)?;
                Ok(Some(g.mul(centred, inv)?))
            }
            (_, c) => Ok(c),
        }
    }

    /// `x = T(u; context)` and `log|det dT/du|` per row (`batch x 1`).
    pub fn forward(&self, g: &mut Graph, u: Var, context: Option<Var>) -> Result<(Var, Var), FlowError> {
        self.check_input(g, u)?;
        self.check_context(g, context)?;
        let context = self.normalize_context(g, context)?;
        let rows = g.value(u).rows();
        let mut x = u;
        let mut logdet = g.constant(Tensor::zeros(rows, 1));
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                FlowLayer::AffineAutoregressive(made) => {
                    // x_i = u_i exp(s_i(x_<i)) + mu_i(x_<i): after k passes the
                    // first k coordinates are exact, so `dim` passes suffice.
                    let input = x;
                    let mut cur = g.constant(Tensor::zeros(rows, self.config.dim));
                    let mut last_s = None;
                    for _ in 0..self.config.dim {
                        let (mu, s) = made.forward(g, &self.params, cur, context)?;
                        let scale = g.exp(s);
                        let scaled = g.mul(input, scale)?;
                        cur = g.add(scaled, mu)?;
                        last_s = Some(s);
                    }
                    let s = last_s.expect("dim >= 1");
                    let ld = g.row_sum(s);
                    logdet = g.add(logdet, ld)?;
                    x = cur;
                }
                FlowLayer::Permutation { perm, .. } => {
                    x = g.permute_cols(x, perm)?;
                }
                FlowLayer::SigmoidBox(b) => {
                    let lower = g.constant(Tensor::row(&b.lower));
                    let widths: Vec<f64> = b.lower.iter().zip(&b.upper).map(|(a, c)| c - a).collect();
                    let width = g.constant(Tensor::row(&widths));
                    let sig = g.sigmoid(x);
                    let scaled = g.mul(sig, width)?;
                    let out = g.add(scaled, lower)?;
                    let ls_pos = g.log_sigmoid(x);
                    let neg = g.neg(x);
                    let ls_neg = g.log_sigmoid(neg);
                    let both = g.add(ls_pos, ls_neg)?;
                    let rs = g.row_sum(both);
                    let ld = g.add_scalar(rs, b.log_widths());
                    logdet = g.add(logdet, ld)?;
                    x = out;
                }
                FlowLayer::Affine(s) => {
                    let m = g.constant(Tensor::row(&s.mean));
                    let sd = g.constant(Tensor::row(&s.std));
                    let scaled = g.mul(x, sd)?;
                    x = g.add(scaled, m)?;
                    let log_sd: f64 = s.std.iter().map(|v| v.ln()).sum();
                    logdet = g.add_scalar(logdet, log_sd);
                }
            }
            check_finite(g, x, idx)?;
            check_finite(g, logdet, idx)?;
        }
        Ok((x, logdet))
    }

    /// `u = T^{-1}(x; context)` and `log|det dT^{-1}/dx|` per row.
    ///
    /// Fails with [`FlowError::OutOfSupport`] if a row is on or outside the
    /// sigmoid box.
    pub fn inverse(&self, g: &mut Graph, x: Var, context: Option<Var>) -> Result<(Var, Var), FlowError> {
        self.check_input(g, x)?;
        self.check_context(g, context)?;
        let context = self.normalize_context(g, context)?;
        let rows = g.value(x).rows();
        let mut z = x;
        let mut logdet = g.constant(Tensor::zeros(rows, 1));
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                FlowLayer::AffineAutoregressive(made) => {
                    let (mu, s) = made.forward(g, &self.params, z, context)?;
                    let centred = g.sub(z, mu)?;
                    let neg_s = g.neg(s);
                    let inv_scale = g.exp(neg_s);
                    z = g.mul(centred, inv_scale)?;
                    let ld = g.row_sum(neg_s);
                    logdet = g.add(logdet, ld)?;
                }
                FlowLayer::Permutation { inverse, .. } => {
                    z = g.permute_cols(z, inverse)?;
                }
                FlowLayer::SigmoidBox(b) => {
                    let vals = g.value(z);
                    for (r, row) in vals.iter_rows().enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            if !(v > b.lower[j] && v < b.upper[j]) {
                                return Err(FlowError::OutOfSupport { row: r, dim: j });
                            }
                        }
                    }
                    let lower = g.constant(Tensor::row(&b.lower));
                    let inv_w: Vec<f64> = b.lower.iter().zip(&b.upper).map(|(a, c)| 1.0 / (c - a)).collect();
                    let inv_w = g.constant(Tensor::row(&inv_w));
                    let shifted = g.sub(z, lower)?;
                    let y = g.mul(shifted, inv_w)?;
                    let one_minus = g.neg(y);
                    let one_minus = g.add_scalar(one_minus, 1.0);
                    // y can round to exactly 0 or 1 even strictly inside the box
                    let log_y = g.log(y).map_err(|_| FlowError::OutOfSupport { row: 0, dim: 0 })?;
                    let log_1my = g.log(one_minus).map_err(|_| FlowError::OutOfSupport { row: 0, dim: 0 })?;
                    z = g.sub(log_y, log_1my)?;
                    let both = g.add(log_y, log_1my)?;
                    let rs = g.row_sum(both);
                    let rs = g.neg(rs);
                    let ld = g.add_scalar(rs, -b.log_widths());
                    logdet = g.add(logdet, ld)?;
                }
                FlowLayer::Affine(s) => {
                    let m = g.constant(Tensor::row(&s.mean));
                    let inv: Vec<f64> = s.std.iter().map(|v| 1.0 / v).collect();
                    let inv = g.constant(Tensor::row(&inv));
                    let centred = g.sub(z, m)?;
                    z = g.mul(centred, inv)?;
                    let log_sd: f64 = s.std.iter().map(|v| v.ln()).sum();
                    logdet = g.add_scalar(logdet, -log_sd);
                }
            }
            check_finite(g, z, idx)?;
            check_finite(g, logdet, idx)?;
        }
        Ok((z, logdet))
    }

    /// `log p(x | context)` per row (`batch x 1`).
    pub fn log_prob(&self, g: &mut Graph, x: Var, context: Option<Var>) -> Result<Var, FlowError> {
        let (u, logdet) = self.inverse(g, x, context)?;
        let base = base_log_prob(g, u, self.config.dim);
        Ok(g.add(base, logdet)?)
    }

    /// Pushes fixed noise through the flow: `(samples, log_probs)`.
    pub fn sample_from_noise(
        &self,
        g: &mut Graph,
        noise: Tensor,
        context: Option<Var>,
    ) -> Result<(Var, Var), FlowError> {
        let u = g.constant(noise);
        let base = base_log_prob(g, u, self.config.dim);
        let (x, logdet) = self.forward(g, u, context)?;
        let lp = g.sub(base, logdet)?;
        Ok((x, lp))
    }

    /// Reparameterized draws: gradients reach weights and context.
    pub fn sample(
        &self,
        g: &mut Graph,
        n: usize,
        context: Option<Var>,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var), FlowError> {
        let noise = standard_normal(rng, n, self.config.dim);
        self.sample_from_noise(g, noise, context)
    }

    /// Gradient-free sampling for a single shared context row.
    pub fn sample_values(
        &self,
        n: usize,
        context: Option<&[f64]>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Vec<f64>), FlowError> {
        let mut g = Graph::no_grad();
        let ctx = context.map(|c| g.constant(Tensor::row(c)));
        let (x, lp) = self.sample(&mut g, n, ctx, rng)?;
        Ok((g.value(x).clone(), g.value(lp).data().to_vec()))
    }

    /// Gradient-free density evaluation. Rows outside the box get `-inf`.
    ///
    /// `contexts` holds either one row shared by all of `x` or one row per
    /// row of `x`; pass `None` for an unconditional flow.
    pub fn log_prob_values(&self, x: &Tensor, contexts: Option<&Tensor>) -> Result<Vec<f64>, FlowError> {
        let n = x.rows();
        let mut out = vec![f64::NEG_INFINITY; n];
        let inside: Vec<usize> = match &self.config.bounds {
            Some(b) => (0..n).filter(|&r| b.contains(x.row_slice(r))).collect(),
            None => (0..n).collect(),
        };
        if inside.is_empty() {
            return Ok(out);
        }
        let mut g = Graph::no_grad();
        let xs = g.constant(x.select_rows(&inside));
        let ctx = match contexts {
            Some(c) if c.rows() == 1 => Some(g.constant(c.clone())),
            Some(c) if c.rows() == n => Some(g.constant(c.select_rows(&inside))),
            Some(c) => {
                return Err(FlowError::DimMismatch {
                    what: "context rows",
                    expected: n,
                    found: c.rows(),
                })
            }
            None => None,
        };
        match self.log_prob(&mut g, xs, ctx) {
            Ok(lp) => {
                for (k, &r) in inside.iter().enumerate() {
                    out[r] = g.value(lp).data()[k];
                }
                Ok(out)
            }
            // rounding at the box edge: fall back to row-by-row evaluation
            Err(FlowError::OutOfSupport { .. }) if inside.len() > 1 => {
                for &r in &inside {
                    let row = x.select_rows(&[r]);
                    let c = contexts.map(|c| if c.rows() == 1 { c.clone() } else { c.select_rows(&[r]) });
                    out[r] = self.log_prob_values(&row, c.as_ref())?[0];
                }
                Ok(out)
            }
            Err(FlowError::OutOfSupport { .. }) => Ok(out),
            Err(e) => Err(e),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: self.config.clone(),
            params: self.params.to_named(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, FlowError> {
        // the weights are overwritten, so any rng works for construction
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut flow = Self::new(ckpt.architecture.clone(), &mut rng)?;
        flow.params
            .load_named(&ckpt.params)
            .map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        Ok(flow)
    }
}

/// `n x dim` tensor of independent standard-normal draws.
pub fn standard_normal(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(n, dim, data).expect("shape")
}
