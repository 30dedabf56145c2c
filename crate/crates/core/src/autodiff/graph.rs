//! Eager reverse-mode graph.
//!
//! Every operation computes its value immediately and appends a node that
//! remembers how to push an upstream gradient back to its parents. Nodes are
//! appended in evaluation order, so the node vector is already a topological
//! order and backward is a single reverse sweep. A graph lives for one
//! forward/backward pass and is then dropped.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MaskedMatMul {
        x: Var,
        w: Var,
        mask: Arc<Tensor>,
        masked: Tensor,
    },
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    PermuteCols {
        x: Var,
        perm: Arc<Vec<usize>>,
    },
    SetSum {
        x: Var,
        group: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
    frozen: Vec<u64>,
    param_nodes: HashMap<(u64, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which nothing requires a gradient; used for evaluation.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn is_no_grad(&self) -> bool {
        self.no_grad
    }

    /// Parameters of `store` enter this graph as constants from now on.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.push(store.uid());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient (e.g. an input whose Jacobian is wanted).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.param_nodes.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.param_nodes.insert(key, v);
        v
    }

    fn broadcast_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let rows = broadcast_dim(ar, br);
        let cols = broadcast_dim(ac, bc);
        match (rows, cols) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(AutodiffError::ShapeMismatch {
                op,
                lhs: (ar, ac),
                rhs: (br, bc),
            }),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (rows, cols) = self.broadcast_shape(op, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Tensor::zeros(rows, cols);
        if av.shape() == bv.shape() {
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                *o = f(x, y);
            }
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    let x = av.get(r.min(av.rows() - 1), c.min(av.cols() - 1));
                    let y = bv.get(r.min(bv.rows() - 1), c.min(bv.cols() - 1));
                    out.set(r, c, f(x, y));
                }
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        let out = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Neg(a), rg)
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Adds a fixed scalar.
    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(Tensor::scalar(k));
        // scalar broadcasting never fails
        self.add(a, c).expect("scalar broadcast")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let out = gemm(self.value(a), false, self.value(b), false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · (w ⊙ mask)` with a fixed binary mask.
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: &Arc<Tensor>) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if mask.shape() != (wr, wc) {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_matmul(mask)",
                lhs: (wr, wc),
                rhs: mask.shape(),
            });
        }
        if xc != wr {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_matmul",
                lhs: (xr, xc),
                rhs: (wr, wc),
            });
        }
        let mut masked = self.value(w).clone();
        for (m, &k) in masked.data_mut().iter_mut().zip(mask.data()) {
            *m *= k;
        }
        let out = gemm(self.value(x), false, &masked, false);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(
            out,
            Op::MaskedMatMul {
                x,
                w,
                mask: Arc::clone(mask),
                masked,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log σ(x)`, evaluated without forming σ(x).
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive operand {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries, as a `1x1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all entries, as a `1x1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sums each row, giving an `r x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sums: Vec<f64> = v.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Tensor::column(&sums);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]),
                    rhs: (r, c),
                });
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row_slice(r);
                out.data_mut()[r * cols + offset..r * cols + offset + src.len()]
                    .copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start > end || end > cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                lhs: (rows, cols),
                rhs: (start, end),
            });
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in v.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        let out = Tensor::new(rows, end - start, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, x: Var, perm: &Arc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if perm.len() != cols || perm.iter().any(|&p| p >= cols) {
            return Err(AutodiffError::ShapeMismatch {
                op: "permute_cols",
                lhs: (rows, cols),
                rhs: (1, perm.len()),
            });
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for (j, &p) in perm.iter().enumerate() {
                out.set(r, j, v.get(r, p));
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::PermuteCols {
                x,
                perm: Arc::clone(perm),
            },
            rg,
        ))
    }

    /// Sums consecutive groups of `group` rows. Each column of a group is
    /// summed in sorted order, so the result does not depend on the order of
    /// rows inside a group, bit for bit.
    pub fn set_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if group == 0 || rows % group != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_sum",
                lhs: (rows, cols),
                rhs: (group, 1),
            });
        }
        let v = self.value(x);
        let n_sets = rows / group;
        let mut out = Tensor::zeros(n_sets, cols);
        let mut buf = vec![0.0; group];
        for s in 0..n_sets {
            for c in 0..cols {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = v.get(s * group + k, c);
                }
                buf.sort_by(f64::total_cmp);
                out.set(s, c, buf.iter().sum());
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SetSum { x, group }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&(uid, idx), &v)| ((uid, idx), v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = reduce_to(g, self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = zip_broadcast(g, val(*b), |gi, y| gi * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = zip_broadcast(g, val(*a), |gi, x| gi * x);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.requires_grad(*a) {
                    let ga = zip_broadcast(g, val(*b), |gi, y| gi / y);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // d(x/y)/dy = -(x/y)/y
                    let q = zip_broadcast(out, val(*b), |o, y| -o / y);
                    let gb = zip_broadcast(g, &q, |gi, qi| gi * qi);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gemm(g, false, val(*b), true));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gemm(val(*a), true, g, false));
                }
            }
            Op::MaskedMatMul { x, w, mask, masked } => {
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, gemm(g, false, masked, true));
                }
                if self.requires_grad(*w) {
                    let mut gw = gemm(val(*x), true, g, false);
                    for (gi, &m) in gw.data_mut().iter_mut().zip(mask.data()) {
                        *gi *= m;
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Tanh(a) => {
                let ga = zip_same(g, out, |gi, t| gi * (1.0 - t * t));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_same(g, out, |gi, s| gi * s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = zip_same(g, val(*a), |gi, x| gi * sigmoid(-x));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_same(g, out, |gi, e| gi * e);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_same(g, val(*a), |gi, x| gi / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = zip_same(g, val(*a), |gi, x| 2.0 * gi * x);
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item() / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    ga.data_mut()[i * c..(i + 1) * c].fill(gi);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.requires_grad(p) {
                        let mut gp = Tensor::zeros(rows, pc);
                        for r in 0..rows {
                            gp.data_mut()[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::Slice { x, start } => {
                let (rows, cols) = self.shape(*x);
                let width = out.cols();
                let mut gx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    gx.data_mut()[r * cols + start..r * cols + start + width]
                        .copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PermuteCols { x, perm } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (j, &p) in perm.iter().enumerate() {
                        gx.set(r, p, gx.get(r, p) + g.get(r, j));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SetSum { x, group } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    gx.data_mut()[r * cols..(r + 1) * cols]
                        .copy_from_slice(g.row_slice(r / group));
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<((u64, usize), Var)>,
}

impl Gradients {
    /// Gradient reaching a node, if any did.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter of `store`, zero for parameters the root
    /// does not depend on.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &((uid, idx), v) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = self.wrt(v) {
                out[idx].add_assign(g);
            }
        }
        out
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let (r, c) = shape;
    let mut out = Tensor::zeros(r, c);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j });
            out.set(oi, oj, out.get(oi, oj) + g.get(i, j));
        }
    }
    out
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Elementwise `f(g, b)` over the shape of `g`, stretching unit axes of `b`.
fn zip_broadcast(g: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if g.shape() == b.shape() {
        return zip_same(g, b, f);
    }
    let mut out = Tensor::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let y = b.get(i.min(b.rows() - 1), j.min(b.cols() - 1));
            out.set(i, j, f(g.get(i, j), y));
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}
