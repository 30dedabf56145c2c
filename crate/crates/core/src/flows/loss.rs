//! Training objectives.

use crate::autodiff::{Graph, Tensor, Var};

use super::{ConditionalFlow, FlowError};

/// A log-density over parameter rows, built into a graph so that gradients
/// reach the rows (`batch x dim` in, `batch x 1` out).
pub trait LogDensityTerm {
    fn log_density(&self, g: &mut Graph, theta: Var) -> Result<Var, FlowError>;
}

/// `log p(observed | theta)` under a frozen conditional flow: the weights
/// receive no gradient, the context `theta` does.
pub struct ConditionalTerm<'a> {
    pub flow: &'a ConditionalFlow,
    /// One row.
    pub observed: &'a Tensor,
}

impl LogDensityTerm for ConditionalTerm<'_> {
    fn log_density(&self, g: &mut Graph, theta: Var) -> Result<Var, FlowError> {
        g.freeze(self.flow.params());
        let rows = g.value(theta).rows();
        let x = g.constant(self.observed.repeat_row(rows));
        self.flow.log_prob(g, x, Some(theta))
    }
}

/// `-mean log p(targets | contexts)`.
///
/// A target outside the flow's support is an error rather than an infinite
/// loss.
pub fn forward_kl_loss(
    flow: &ConditionalFlow,
    g: &mut Graph,
    targets: Var,
    contexts: Option<Var>,
) -> Result<Var, FlowError> {
    let rows = g.value(targets).rows();
    if rows == 0 {
        return Err(FlowError::EmptyBatch);
    }
    if let Some(c) = contexts {
        let cr = g.value(c).rows();
        if cr != rows && cr != 1 {
            return Err(FlowError::DimMismatch {
                what: "context rows",
                expected: rows,
                found: cr,
            });
        }
    }
    let lp = flow.log_prob(g, targets, contexts)?;
    let m = g.mean(lp);
    Ok(g.neg(m))
}

/// Monte Carlo reverse KL from `flow(. | context)` to the unnormalized
/// target `sum(terms)`: `mean[log q(theta) - sum_k term_k(theta)]` with
/// `theta = T(noise; context)`.
///
/// `noise` is `n_mini x dim` standard-normal; drawing it outside keeps the
/// loss a deterministic function of the weights.
pub fn reverse_kl_loss(
    flow: &ConditionalFlow,
    g: &mut Graph,
    context: Option<Var>,
    noise: Tensor,
    terms: &[&dyn LogDensityTerm],
) -> Result<Var, FlowError> {
    if noise.rows() == 0 {
        return Err(FlowError::EmptyBatch);
    }
    let (theta, log_q) = flow.sample_from_noise(g, noise, context)?;
    let mut total = log_q;
    for term in terms {
        let lp = term.log_density(g, theta)?;
        total = g.sub(total, lp)?;
    }
    Ok(g.mean(total))
}
