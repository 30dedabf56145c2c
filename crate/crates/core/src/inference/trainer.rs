use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor, Var};
use crate::flows::{forward_kl_loss, ConditionalFlow, FlowError};
use crate::models::DeepSets;

use super::{is_non_finite, InferenceError};

const MIN_PAIRS: usize = 10;

/// Forward-KL fitting schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub val_frac: f64,
    /// Hard cap; patience normally stops training long before this.
    pub max_epochs: usize,
}

impl TrainConfig {
    /// Batch 50, patience 20, minimum improvement 1e-4.
    pub fn new(lr: f64, val_frac: f64) -> Self {
        Self {
            lr,
            batch_size: 50,
            patience: 20,
            min_delta: 1e-4,
            val_frac,
            max_epochs: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss before training, then after every epoch.
    pub val_loss: Vec<f64>,
    /// Index into `val_loss` of the restored weights.
    pub best_epoch: usize,
    pub best_val: f64,
    /// A non-finite loss cut training short.
    pub degraded: bool,
    pub n_val: usize,
}

struct Snapshot {
    flow: Vec<Tensor>,
    encoder: Option<Vec<Tensor>>,
}

fn snapshot(flow: &ConditionalFlow, encoder: Option<&DeepSets>) -> Snapshot {
    Snapshot {
        flow: flow.params().snapshot(),
        encoder: encoder.map(|e| e.params().snapshot()),
    }
}

fn restore(flow: &mut ConditionalFlow, encoder: Option<&mut DeepSets>, s: &Snapshot) {
    flow.params_mut().restore(&s.flow);
    if let (Some(e), Some(w)) = (encoder, &s.encoder) {
        e.params_mut().restore(w);
    }
}

fn build_loss(
    flow: &ConditionalFlow,
    encoder: Option<&DeepSets>,
    g: &mut Graph,
    contexts: &Tensor,
    targets: &Tensor,
) -> Result<Var, FlowError> {
    let ctx = match encoder {
        Some(e) => e.forward_flat(g, contexts)?,
        None => g.constant(contexts.clone()),
    };
    let t = g.constant(targets.clone());
    forward_kl_loss(flow, g, t, Some(ctx))
}

/// `Ok(None)` when the loss blew up.
fn eval_loss(
    flow: &ConditionalFlow,
    encoder: Option<&DeepSets>,
    contexts: &Tensor,
    targets: &Tensor,
) -> Result<Option<f64>, FlowError> {
    let mut g = Graph::no_grad();
    match build_loss(flow, encoder, &mut g, contexts, targets) {
        Ok(l) => {
            let v = g.value(l).item();
            Ok(v.is_finite().then_some(v))
        }
        Err(e) if is_non_finite(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Fits `flow` to `p(targets | contexts)` by Adam on the forward KL.
///
/// A random `val_frac` share of the pairs is held out; training stops once
/// the validation loss has not improved by `min_delta` for `patience`
/// epochs, and the best-validation weights are restored. With an `encoder`
/// the contexts are raw sets and the encoder is trained jointly.
pub fn train_density_model(
    flow: &mut ConditionalFlow,
    encoder: Option<&mut DeepSets>,
    contexts: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport, InferenceError> {
    let mut adam_flow = Adam::new(flow.params());
    let mut adam_enc = encoder.as_deref().map(|e| Adam::new(e.params()));
    train_with_optimizers(flow, encoder, contexts, targets, cfg, rng, &mut adam_flow, adam_enc.as_mut())
}

/// [`train_density_model`] with caller-owned optimizer state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_with_optimizers(
    flow: &mut ConditionalFlow,
    mut encoder: Option<&mut DeepSets>,
    contexts: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    adam_flow: &mut Adam,
    mut adam_enc: Option<&mut Adam>,
) -> Result<TrainReport, InferenceError> {
    let n = targets.rows();
    if n < MIN_PAIRS {
        return Err(InferenceError::TooFewPairs { need: MIN_PAIRS, got: n });
    }
    if contexts.rows() != n {
        return Err(InferenceError::Config(format!(
            "{} contexts for {n} targets",
            contexts.rows()
        )));
    }
    if !(cfg.val_frac > 0.0 && cfg.val_frac < 1.0) || cfg.batch_size == 0 {
        return Err(InferenceError::Config(format!(
            "val_frac {} and batch size {} are not usable",
            cfg.val_frac, cfg.batch_size
        )));
    }
    let n_val = ((n as f64 * cfg.val_frac).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_ctx = contexts.select_rows(val_idx);
    let val_tgt = targets.select_rows(val_idx);
    let mut train_idx = train_idx.to_vec();

    let mut report = TrainReport {
        n_val,
        ..Default::default()
    };
    let mut best = snapshot(flow, encoder.as_deref());
    let mut best_val = eval_loss(flow, encoder.as_deref(), &val_ctx, &val_tgt)?.unwrap_or(f64::INFINITY);
    report.val_loss.push(best_val);

    let mut since_best = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let c = contexts.select_rows(chunk);
            let t = targets.select_rows(chunk);
            let mut g = Graph::new();
            let step: Result<f64, FlowError> = (|| {
                let loss = build_loss(flow, encoder.as_deref(), &mut g, &c, &t)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Ok(value);
                }
                let grads = g.backward(loss)?;
                let gf = grads.for_store(flow.params());
                adam_flow.step(flow.params_mut(), &gf, cfg.lr)?;
                if let (Some(e), Some(a)) = (encoder.as_deref_mut(), adam_enc.as_deref_mut()) {
                    let ge = grads.for_store(e.params());
                    a.step(e.params_mut(), &ge, cfg.lr)?;
                }
                Ok(value)
            })();
            match step {
                Ok(v) if v.is_finite() => {
                    sum += v;
                    batches += 1;
                }
                Ok(_) => {
                    report.degraded = true;
                    break 'epochs;
                }
                Err(e) if is_non_finite(&e) => {
                    report.degraded = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
        }
        report.train_loss.push(sum / batches.max(1) as f64);
        let val = match eval_loss(flow, encoder.as_deref(), &val_ctx, &val_tgt)? {
            Some(v) => v,
            None => {
                report.val_loss.push(f64::NAN);
                report.degraded = true;
                break;
            }
        };
        report.val_loss.push(val);
        if val < best_val - cfg.min_delta {
            best_val = val;
            best = snapshot(flow, encoder.as_deref());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    restore(flow, encoder, &best);
    report.best_val = best_val;
    Ok(report)
}
