//! Masked autoencoder conditioner for one affine autoregressive layer.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use super::FlowError;

/// Feed-forward network whose outputs `(shift_i, log_scale_i)` depend only
/// on inputs `0..i` (in layer order) and on the whole context.
///
/// Hidden units carry degrees in `0..dim`; a degree-0 unit sees only the
/// context, which is what lets the first coordinate be conditioned on it.
#[derive(Clone, Debug)]
pub struct MadeConditioner {
    dim: usize,
    context_dim: usize,
    log_scale_clamp: f64,
    input_w: ParamId,
    context_w: Option<ParamId>,
    input_mask: Arc<Tensor>,
    hidden_w: Vec<ParamId>,
    hidden_masks: Vec<Arc<Tensor>>,
    biases: Vec<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
    out_mask: Arc<Tensor>,
}

fn hidden_degrees(width: usize, dim: usize) -> Vec<usize> {
    (0..width).map(|k| k % dim).collect()
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

impl MadeConditioner {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        context_dim: usize,
        hidden: &[usize],
        log_scale_clamp: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, FlowError> {
        assert!(!hidden.is_empty(), "MADE needs at least one hidden layer");
        let fan_in = (dim + context_dim) as f64;
        let bound = 1.0 / fan_in.sqrt();

        let h0 = hidden_degrees(hidden[0], dim);
        let mut input_mask = Tensor::zeros(dim, hidden[0]);
        for i in 0..dim {
            for (k, &dk) in h0.iter().enumerate() {
                if dk > i {
                    input_mask.set(i, k, 1.0);
                }
            }
        }
        let input_w = store.add(format!("{prefix}.input_w"), uniform(rng, dim, hidden[0], bound))?;
        let context_w = if context_dim > 0 {
            Some(store.add(
                format!("{prefix}.context_w"),
                uniform(rng, context_dim, hidden[0], bound),
            )?)
        } else {
            None
        };
        let mut biases = vec![store.add(format!("{prefix}.b0"), uniform(rng, 1, hidden[0], bound))?];

        let mut hidden_w = Vec::new();
        let mut hidden_masks = Vec::new();
        let mut prev = h0;
        for (l, &width) in hidden.iter().enumerate().skip(1) {
            let degs = hidden_degrees(width, dim);
            let mut mask = Tensor::zeros(prev.len(), width);
            for (k, &dk) in prev.iter().enumerate() {
                for (j, &dj) in degs.iter().enumerate() {
                    if dj >= dk {
                        mask.set(k, j, 1.0);
                    }
                }
            }
            let b = 1.0 / (prev.len() as f64).sqrt();
            hidden_w.push(store.add(format!("{prefix}.w{l}"), uniform(rng, prev.len(), width, b))?);
            hidden_masks.push(Arc::new(mask));
            biases.push(store.add(format!("{prefix}.b{l}"), uniform(rng, 1, width, b))?);
            prev = degs;
        }

        // outputs: [shift_0..shift_d, log_scale_0..log_scale_d]
        let mut out_mask = Tensor::zeros(prev.len(), 2 * dim);
        for (k, &dk) in prev.iter().enumerate() {
            for j in 0..dim {
                if j + 1 > dk {
                    out_mask.set(k, j, 1.0);
                    out_mask.set(k, dim + j, 1.0);
                }
            }
        }
        // zero output layer: the layer starts as the identity map
        let out_w = store.add(format!("{prefix}.out_w"), Tensor::zeros(prev.len(), 2 * dim))?;
        let out_b = store.add(format!("{prefix}.out_b"), Tensor::zeros(1, 2 * dim))?;

        Ok(Self {
            dim,
            context_dim,
            log_scale_clamp,
            input_w,
            context_w,
            input_mask: Arc::new(input_mask),
            hidden_w,
            hidden_masks,
            biases,
            out_w,
            out_b,
            out_mask: Arc::new(out_mask),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// `(shift, log_scale)`, each `batch x dim`. `context` may have one row
    /// (shared by the batch) or one row per input.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        context: Option<Var>,
    ) -> Result<(Var, Var), FlowError> {
        let w = g.param(store, self.input_w);
        let mut h = g.masked_matmul(x, w, &self.input_mask)?;
        if let (Some(cw), Some(ctx)) = (self.context_w, context) {
            let cw = g.param(store, cw);
            let c = g.matmul(ctx, cw)?;
            h = g.add(h, c)?;
        }
        let b0 = g.param(store, self.biases[0]);
        h = g.add(h, b0)?;
        h = g.tanh(h);
        for ((&wid, mask), &bid) in self.hidden_w.iter().zip(&self.hidden_masks).zip(&self.biases[1..]) {
            let w = g.param(store, wid);
            let b = g.param(store, bid);
            h = g.masked_matmul(h, w, mask)?;
            h = g.add(h, b)?;
            h = g.tanh(h);
        }
        let ow = g.param(store, self.out_w);
        let ob = g.param(store, self.out_b);
        let o = g.masked_matmul(h, ow, &self.out_mask)?;
        let o = g.add(o, ob)?;
        let shift = g.slice(o, 0, self.dim)?;
        let raw = g.slice(o, self.dim, 2 * self.dim)?;
        // soft clamp to (-c, c)
        let c = self.log_scale_clamp;
        let scaled = g.scale(raw, 1.0 / c);
        let t = g.tanh(scaled);
        let log_scale = g.scale(t, c);
        Ok((shift, log_scale))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.input_w];
        ids.extend(self.context_w);
        ids.extend(&self.hidden_w);
        ids.extend(&self.biases);
        ids.push(self.out_w);
        ids.push(self.out_b);
        ids
    }
}
