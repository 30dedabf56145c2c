use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{exp_lr_decay, Adam, Graph, Tensor, Var};
use crate::flows::{
    reverse_kl_loss, standard_normal, ConditionalFlow, ConditionalTerm, FlowConfig, FlowError, LogDensityTerm,
    Standardization,
};
use crate::models::{DeepSets, Simulator};
use crate::rng::{stream, STREAM_FLOW_INIT, STREAM_SIMULATE, STREAM_STEP2_NOISE};

use super::proposal::{mixture_weight, proposal_mixture_sample};
use super::trainer::{train_density_model, train_with_optimizers, TrainConfig};
use super::{is_non_finite, FlowArch, InferenceError, RoundRecord, RoundStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnplaConfig {
    pub rounds: usize,
    /// Simulations per round.
    pub n_sims: usize,
    /// Posterior-flow samples per round in step 2.
    pub n_post: usize,
    pub n_mini: usize,
    pub lambda: f64,
    pub lr_like: f64,
    pub lr_post: f64,
    pub gamma_post: f64,
    pub val_frac: f64,
    pub seed: u64,
    pub use_summary_net: bool,
    pub n_test_post: usize,
    /// Mini-batches without validation improvement before step 2 stops.
    pub step2_patience: usize,
    pub like_batch_size: usize,
    pub like_patience: usize,
    pub like_min_delta: f64,
    pub like_max_epochs: usize,
    pub flow: FlowArch,
}

impl SnplaConfig {
    pub fn new(rounds: usize, n_sims: usize, n_post: usize) -> Self {
        Self {
            rounds,
            n_sims,
            n_post,
            n_mini: 1000,
            lambda: 0.7,
            lr_like: 0.001,
            lr_post: 0.001,
            gamma_post: 0.9,
            val_frac: 0.1,
            seed: 0,
            use_summary_net: false,
            n_test_post: 1000,
            step2_patience: 10,
            like_batch_size: 50,
            like_patience: 20,
            like_min_delta: 1e-4,
            like_max_epochs: 1000,
            flow: FlowArch::default(),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::Config(m.to_string()));
        if self.rounds < 1 {
            return bad("rounds must be at least 1");
        }
        if self.n_mini == 0 || self.n_mini > self.n_post {
            return bad("need 0 < n_mini <= n_post");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return bad("val_frac must lie in (0, 1)");
        }
        if !(self.gamma_post > 0.0 && self.gamma_post <= 1.0) {
            return bad("gamma_post must lie in (0, 1]");
        }
        if !(self.lr_like > 0.0 && self.lr_post > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.n_test_post == 0 || self.flow.n_layers == 0 || self.flow.hidden.is_empty() {
            return bad("n_test_post, n_layers and hidden must be non-empty");
        }
        Ok(())
    }

    pub(crate) fn like_train(&self, lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            batch_size: self.like_batch_size,
            patience: self.like_patience,
            min_delta: self.like_min_delta,
            val_frac: self.val_frac,
            max_epochs: self.like_max_epochs,
        }
    }
}

pub struct SnplaOutput {
    pub likelihood: ConditionalFlow,
    pub posterior: ConditionalFlow,
    pub summary_net: Option<DeepSets>,
    pub rounds: Vec<RoundRecord>,
}

impl SnplaOutput {
    /// Context the posterior flow is conditioned on for `x_obs`.
    pub fn observed_context(&self, x_obs: &[f64]) -> Result<Vec<f64>, FlowError> {
        observed_context(self.summary_net.as_ref(), x_obs)
    }
}

fn observed_context(net: Option<&DeepSets>, x_obs: &[f64]) -> Result<Vec<f64>, FlowError> {
    match net {
        Some(n) => {
            let mut g = Graph::no_grad();
            let s = n.forward_flat(&mut g, &Tensor::row(x_obs))?;
            Ok(g.value(s).data().to_vec())
        }
        None => Ok(x_obs.to_vec()),
    }
}

/// Reverse-KL objective of step 2 on fixed noise.
fn step2_loss(
    posterior: &ConditionalFlow,
    net: Option<&DeepSets>,
    likelihood: &ConditionalFlow,
    prior: &dyn LogDensityTerm,
    x_obs: &Tensor,
    g: &mut Graph,
    noise: Tensor,
) -> Result<Var, FlowError> {
    let ctx = match net {
        Some(n) => n.forward_flat(g, x_obs)?,
        None => g.constant(x_obs.clone()),
    };
    let like = ConditionalTerm {
        flow: likelihood,
        observed: x_obs,
    };
    reverse_kl_loss(posterior, g, Some(ctx), noise, &[&like, prior])
}

fn step2_value(
    posterior: &ConditionalFlow,
    net: Option<&DeepSets>,
    likelihood: &ConditionalFlow,
    prior: &dyn LogDensityTerm,
    x_obs: &Tensor,
    noise: &Tensor,
) -> Result<f64, FlowError> {
    let mut g = Graph::no_grad();
    let l = step2_loss(posterior, net, likelihood, prior, x_obs, &mut g, noise.clone())?;
    let v = g.value(l).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FlowError::NonFinite { layer: usize::MAX })
    }
}

struct Step2Trace {
    loss: Vec<f64>,
    val: Vec<f64>,
}

/// One pass of simulation-on-the-fly updates. Keeps the best-validation
/// weights; a non-finite loss aborts with the error.
#[allow(clippy::too_many_arguments)]
fn step2_pass(
    posterior: &mut ConditionalFlow,
    mut net: Option<&mut DeepSets>,
    likelihood: &ConditionalFlow,
    prior: &dyn LogDensityTerm,
    x_obs: &Tensor,
    cfg: &SnplaConfig,
    lr: f64,
    val_noise: &Tensor,
    rng: &mut impl rand::Rng,
    adam_p: &mut Adam,
    mut adam_s: Option<&mut Adam>,
) -> Result<Step2Trace, FlowError> {
    let d = posterior.dim();
    let mut best_val = step2_value(posterior, net.as_deref(), likelihood, prior, x_obs, val_noise)?;
    let mut best_p = posterior.params().snapshot();
    let mut best_s = net.as_deref().map(|n| n.params().snapshot());
    let mut trace = Step2Trace {
        loss: Vec::new(),
        val: vec![best_val],
    };
    let mut since_best = 0;
    for _ in 0..cfg.n_post / cfg.n_mini {
        let noise = standard_normal(rng, cfg.n_mini, d);
        let mut g = Graph::new();
        let loss = step2_loss(posterior, net.as_deref(), likelihood, prior, x_obs, &mut g, noise)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(FlowError::NonFinite { layer: usize::MAX });
        }
        trace.loss.push(value);
        let grads = g.backward(loss)?;
        let gp = grads.for_store(posterior.params());
        adam_p.step(posterior.params_mut(), &gp, lr)?;
        if let (Some(n), Some(a)) = (net.as_deref_mut(), adam_s.as_deref_mut()) {
            let gs = grads.for_store(n.params());
            a.step(n.params_mut(), &gs, lr)?;
        }
        let val = step2_value(posterior, net.as_deref(), likelihood, prior, x_obs, val_noise)?;
        trace.val.push(val);
        if val < best_val {
            best_val = val;
            best_p = posterior.params().snapshot();
            best_s = net.as_deref().map(|n| n.params().snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.step2_patience {
                break;
            }
        }
    }
    posterior.params_mut().restore(&best_p);
    if let (Some(n), Some(w)) = (net, best_s) {
        n.params_mut().restore(&w);
    }
    Ok(trace)
}

pub(crate) fn simulate_into(
    simulator: &dyn Simulator,
    theta: &Tensor,
    rng: &mut dyn rand::RngCore,
    thetas: &mut Vec<f64>,
    xs: &mut Vec<f64>,
) {
    for row in theta.iter_rows() {
        let x = simulator.simulate(row, rng);
        thetas.extend_from_slice(row);
        xs.extend(x);
    }
}

/// Sequential neural posterior and likelihood approximation.
///
/// Each round draws `n_sims` parameters from the prior/posterior mixture,
/// simulates, refits the likelihood flow on everything simulated so far,
/// and then moves the posterior flow towards `likelihood(x_obs | .) prior`
/// by reverse KL. Round 1 also pre-trains the posterior by forward KL on
/// the prior-predictive pairs.
pub fn snpla_run(
    cfg: &SnplaConfig,
    simulator: &dyn Simulator,
    x_obs: &[f64],
) -> Result<SnplaOutput, InferenceError> {
    cfg.validate()?;
    if x_obs.len() != simulator.data_dim() {
        return Err(InferenceError::ObservationDim {
            expected: simulator.data_dim(),
            got: x_obs.len(),
        });
    }
    let prior = simulator.prior();
    let d = simulator.theta_dim();
    let p = simulator.data_dim();

    // simulate: proposal draws and simulator calls; flow-init: weights, then
    // trainer shuffles; step2-noise: reverse-KL noise and evaluation draws
    let mut sim_rng = stream(cfg.seed, STREAM_SIMULATE);
    let mut init_rng = stream(cfg.seed, STREAM_FLOW_INIT);
    let mut noise_rng = stream(cfg.seed, STREAM_STEP2_NOISE);

    let x_obs_t = Tensor::row(x_obs);
    let mut thetas: Vec<f64> = Vec::with_capacity(cfg.rounds * cfg.n_sims * d);
    let mut xs: Vec<f64> = Vec::with_capacity(cfg.rounds * cfg.n_sims * p);
    let mut records = Vec::with_capacity(cfg.rounds);

    // round 1 draws from the prior alone (alpha = 1); the flows are built
    // after it so their fixed standardization can come from these pairs
    let t0 = Instant::now();
    let first = prior.sample_n(cfg.n_sims, &mut sim_rng);
    simulate_into(simulator, &first, &mut sim_rng, &mut thetas, &mut xs);
    let first_sim_time = t0.elapsed().as_secs_f64();
    let theta_norm = Standardization::from_rows(&first);
    let x_norm = Standardization::from_rows(&Tensor::new(cfg.n_sims, p, xs.clone())?);

    let like_cfg = FlowConfig::new(p, d)
        .with_layers(cfg.flow.n_layers, cfg.flow.hidden.clone())
        .with_context_norm(theta_norm.clone())
        .with_target_norm(x_norm.clone());
    let mut likelihood = ConditionalFlow::new(like_cfg, &mut init_rng)?;
    // warm starts keep the optimizer state along with the weights
    let mut adam_l = Adam::new(likelihood.params());
    let mut net = if cfg.use_summary_net {
        let n = DeepSets::default_for_pairs(&mut init_rng);
        if p % n.elem_dim() != 0 {
            return Err(InferenceError::Config(format!(
                "data of width {p} is not a set of {}-vectors",
                n.elem_dim()
            )));
        }
        Some(n)
    } else {
        None
    };
    let ctx_dim = net.as_ref().map_or(p, |n| n.out_dim());
    let mut post_cfg = FlowConfig::new(d, ctx_dim).with_layers(cfg.flow.n_layers, cfg.flow.hidden.clone());
    if net.is_none() {
        post_cfg = post_cfg.with_context_norm(x_norm);
    }
    post_cfg = match prior.bounds() {
        Some(b) => post_cfg.with_bounds(b),
        None => post_cfg.with_target_norm(theta_norm),
    };
    let mut posterior = ConditionalFlow::new(post_cfg, &mut init_rng)?;
    // the hot start gets its own optimizer; the reverse-KL state is created
    // after it and then carried across rounds
    let mut adam_p = Adam::new(posterior.params());
    let mut adam_s = net.as_ref().map(|n| Adam::new(n.params()));

    for r in 1..=cfg.rounds {
        let alpha = mixture_weight(cfg.lambda, r);
        let mut rec = RoundRecord::new(r, alpha);

        // step 1: propose, simulate, refit the likelihood
        let round_start = xs.len() / p - if r == 1 { cfg.n_sims } else { 0 };
        if r == 1 {
            rec.timings.simulate = first_sim_time;
        } else {
            let t0 = Instant::now();
            let ctx_obs = observed_context(net.as_ref(), x_obs)?;
            let draw = proposal_mixture_sample(cfg.n_sims, alpha, prior, &posterior, &ctx_obs, &mut sim_rng)?;
            simulate_into(simulator, &draw.theta, &mut sim_rng, &mut thetas, &mut xs);
            rec.timings.simulate = t0.elapsed().as_secs_f64();
        }
        let n_total = xs.len() / p;
        rec.dataset_size = n_total;

        let t1 = Instant::now();
        let theta_t = Tensor::new(n_total, d, thetas.clone())?;
        let x_t = Tensor::new(n_total, p, xs.clone())?;
        let rep = train_with_optimizers(
            &mut likelihood,
            None,
            &theta_t,
            &x_t,
            &cfg.like_train(cfg.lr_like),
            &mut init_rng,
            &mut adam_l,
            None,
        )?;
        rec.like_train_loss = rep.train_loss;
        rec.like_val_loss = rep.val_loss;
        if rep.degraded {
            rec.degrade();
        }
        rec.timings.train_like = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        // step 2': hot start on the round-1 prior-predictive pairs
        if r == 1 {
            let x1 = x_t.select_rows(&(round_start..n_total).collect::<Vec<_>>());
            let th1 = theta_t.select_rows(&(round_start..n_total).collect::<Vec<_>>());
            let rep = train_density_model(
                &mut posterior,
                net.as_mut(),
                &x1,
                &th1,
                &cfg.like_train(cfg.lr_post),
                &mut init_rng,
            )?;
            rec.post_loss.extend(rep.train_loss);
            if rep.degraded {
                rec.degrade();
            }
            adam_p = Adam::new(posterior.params());
            adam_s = net.as_ref().map(|n| Adam::new(n.params()));
        }

        // step 2: reverse KL with fresh posterior samples per mini-batch
        let n_val = ((cfg.n_post as f64 * cfg.val_frac).round() as usize).max(1);
        let val_noise = standard_normal(&mut noise_rng, n_val, d);
        let pre_p = posterior.params().snapshot();
        let pre_s = net.as_ref().map(|n| n.params().snapshot());
        let pre_adam = (adam_p.clone(), adam_s.clone());
        let mut lr = exp_lr_decay(cfg.lr_post, cfg.gamma_post, r);
        let mut attempt = 0;
        loop {
            let res = step2_pass(
                &mut posterior,
                net.as_mut(),
                &likelihood,
                prior,
                &x_obs_t,
                cfg,
                lr,
                &val_noise,
                &mut noise_rng,
                &mut adam_p,
                adam_s.as_mut(),
            );
            match res {
                Ok(trace) => {
                    rec.post_loss.extend(trace.loss);
                    rec.post_val_loss = trace.val;
                    break;
                }
                Err(e) if is_non_finite(&e) => {
                    posterior.params_mut().restore(&pre_p);
                    if let (Some(n), Some(w)) = (net.as_mut(), pre_s.as_ref()) {
                        n.params_mut().restore(w);
                    }
                    (adam_p, adam_s) = pre_adam.clone();
                    attempt += 1;
                    if attempt >= 2 {
                        rec.status = RoundStatus::Failed;
                        break;
                    }
                    rec.degrade();
                    lr *= 0.5;
                }
                Err(e) => return Err(e.into()),
            }
        }
        rec.timings.train_post = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        let ctx_obs = observed_context(net.as_ref(), x_obs)?;
        rec.samples = posterior.sample_values(cfg.n_test_post, Some(&ctx_obs), &mut noise_rng)?.0;
        rec.timings.sample = t3.elapsed().as_secs_f64();
        records.push(rec);
    }

    Ok(SnplaOutput {
        likelihood,
        posterior,
        summary_net: net,
        rounds: records,
    })
}
