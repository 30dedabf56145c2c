use rand::Rng;

use crate::autodiff::Tensor;
use crate::flows::ConditionalFlow;
use crate::models::Prior;

use super::InferenceError;

/// `alpha = exp(-lambda (r - 1))` for 1-based round `r`.
pub fn mixture_weight(lambda: f64, round: usize) -> f64 {
    (-lambda * (round as f64 - 1.0)).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDraw {
    pub theta: Tensor,
    /// `true` where the row came from the prior.
    pub from_prior: Vec<bool>,
}

impl MixtureDraw {
    pub fn prior_fraction(&self) -> f64 {
        self.from_prior.iter().filter(|&&b| b).count() as f64 / self.from_prior.len().max(1) as f64
    }
}

/// `n` independent draws from `alpha p(theta) + (1 - alpha) q(theta | context)`.
pub fn proposal_mixture_sample<R: Rng>(
    n: usize,
    alpha: f64,
    prior: &Prior,
    posterior: &ConditionalFlow,
    context: &[f64],
    rng: &mut R,
) -> Result<MixtureDraw, InferenceError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(InferenceError::Config(format!("mixture weight {alpha} outside [0, 1]")));
    }
    let d = prior.dim();
    let from_prior: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < alpha).collect();
    let n_flow = from_prior.iter().filter(|&&b| !b).count();
    let flow_draws = if n_flow > 0 {
        posterior.sample_values(n_flow, Some(context), rng)?.0
    } else {
        Tensor::zeros(0, d)
    };
    let mut data = Vec::with_capacity(n * d);
    let mut k = 0;
    for &p in &from_prior {
        if p {
            data.extend(prior.sample(rng));
        } else {
            data.extend_from_slice(flow_draws.row_slice(k));
            k += 1;
        }
    }
    Ok(MixtureDraw {
        theta: Tensor::new(n, d, data)?,
        from_prior,
    })
}
