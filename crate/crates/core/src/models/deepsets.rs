use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::flows::FlowError;

/// `rho(sum_i phi(x_i))` with tanh MLPs; the last layer of `rho` is linear.
#[derive(Clone, Debug)]
pub struct DeepSets {
    elem_dim: usize,
    out_dim: usize,
    phi: Vec<(ParamId, ParamId)>,
    rho: Vec<(ParamId, ParamId)>,
    params: ParamStore,
}

fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
    let b = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-b..b)).collect();
    let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-b..b)).collect();
    let w = store.add(format!("{name}.w"), Tensor::new(fan_in, fan_out, w).expect("shape"));
    let bias = store.add(format!("{name}.b"), Tensor::row(&bias));
    (w.expect("unique"), bias.expect("unique"))
}

impl DeepSets {
    /// `phi: elem_dim -> phi_widths..`, `rho: last -> rho_widths..`.
    pub fn new(elem_dim: usize, phi_widths: &[usize], rho_widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(!phi_widths.is_empty() && !rho_widths.is_empty());
        let mut params = ParamStore::new();
        let mut phi = Vec::new();
        let mut prev = elem_dim;
        for (l, &w) in phi_widths.iter().enumerate() {
            phi.push(dense(&mut params, &format!("phi{l}"), prev, w, rng));
            prev = w;
        }
        let mut rho = Vec::new();
        for (l, &w) in rho_widths.iter().enumerate() {
            rho.push(dense(&mut params, &format!("rho{l}"), prev, w, rng));
            prev = w;
        }
        Self {
            elem_dim,
            out_dim: prev,
            phi,
            rho,
            params,
        }
    }

    /// `phi: 2 -> 32 -> 32`, `rho: 32 -> 32 -> 5`.
    pub fn default_for_pairs(rng: &mut impl Rng) -> Self {
        Self::new(2, &[32, 32], &[32, 5], rng)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Output widths of the `phi` and `rho` layers.
    pub fn widths(&self) -> (Vec<usize>, Vec<usize>) {
        let w = |layers: &[(ParamId, ParamId)]| layers.iter().map(|&(w, _)| self.params.get(w).cols()).collect();
        (w(&self.phi), w(&self.rho))
    }

    pub fn elem_dim(&self) -> usize {
        self.elem_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `elements` stacks the sets: rows `k*set_size .. (k+1)*set_size` form
    /// set `k`. Returns one summary row per set.
    pub fn forward(&self, g: &mut Graph, elements: Var, set_size: usize) -> Result<Var, FlowError> {
        let mut h = elements;
        for &(w, b) in &self.phi {
            h = self.affine(g, h, w, b)?;
            h = g.tanh(h);
        }
        // sums in a fixed order, so any permutation gives identical bits
        h = g.set_sum(h, set_size)?;
        let last = self.rho.len() - 1;
        for (l, &(w, b)) in self.rho.iter().enumerate() {
            h = self.affine(g, h, w, b)?;
            if l < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Sets given as flattened rows (`batch x set_size*elem_dim`), which is
    /// how the simulator returns them.
    pub fn forward_flat(&self, g: &mut Graph, flat: &Tensor) -> Result<Var, FlowError> {
        let set_size = flat.cols() / self.elem_dim;
        assert_eq!(set_size * self.elem_dim, flat.cols(), "row length is not a whole number of elements");
        let stacked = Tensor::new(flat.rows() * set_size, self.elem_dim, flat.data().to_vec())?;
        let x = g.constant(stacked);
        self.forward(g, x, set_size)
    }

    fn affine(&self, g: &mut Graph, h: Var, w: ParamId, b: ParamId) -> Result<Var, FlowError> {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let z = g.matmul(h, w)?;
        Ok(g.add(z, b)?)
    }
}
