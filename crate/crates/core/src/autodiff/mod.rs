//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine is deliberately small: rank-2 tensors, an eager [`Graph`] that
//! is rebuilt for every forward pass, named parameters in a [`ParamStore`],
//! [`Adam`], and a central-difference checker used by the test-suite and the
//! `gradcheck` command.
//!
//! ```
//! use snpla_core::autodiff::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let p = store.add("p", Tensor::row(&[1.0, 2.0])).unwrap();
//! let mut g = Graph::new();
//! let x = g.param(&store, p);
//! let sq = g.square(x);
//! let loss = g.mean(sq);
//! let grads = g.backward(loss).unwrap().for_store(&store);
//! assert_eq!(grads[0].data(), &[1.0, 2.0]);
//! ```

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{exp_lr_decay, Adam};
pub use gradcheck::{finite_diff_check, relative_error, FiniteDiffReport, REL_ERROR_FLOOR};
pub use graph::{log_sigmoid, sigmoid, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: operand outside domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("backward needs a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("tensor {rows}x{cols} cannot hold {len} values")]
    BadData { rows: usize, cols: usize, len: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
}

#[cfg(test)]
mod tests;
