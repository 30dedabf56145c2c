use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{exp_lr_decay, Adam, Tensor};
use crate::flows::{ConditionalFlow, FlowConfig, Standardization};
use crate::models::{Prior, Simulator};
use crate::rng::{stream, STREAM_FLOW_INIT, STREAM_MCMC, STREAM_SIMULATE};

use super::mcmc::{mcmc_sample, McmcConfig};
use super::snpla::simulate_into;
use super::trainer::{train_with_optimizers, TrainConfig};
use super::{FlowArch, InferenceError, RoundRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnlConfig {
    pub rounds: usize,
    pub n_sims: usize,
    pub lr_like: f64,
    /// Per-round multiplicative learning-rate decay (1 = constant).
    pub lr_decay: f64,
    pub val_frac: f64,
    pub seed: u64,
    pub n_test_post: usize,
    pub like_batch_size: usize,
    pub like_patience: usize,
    pub like_min_delta: f64,
    pub like_max_epochs: usize,
    pub mcmc: McmcConfig,
    pub flow: FlowArch,
}

impl SnlConfig {
    pub fn new(rounds: usize, n_sims: usize) -> Self {
        Self {
            rounds,
            n_sims,
            lr_like: 0.0005,
            lr_decay: 1.0,
            val_frac: 0.1,
            seed: 0,
            n_test_post: 1000,
            like_batch_size: 50,
            like_patience: 20,
            like_min_delta: 1e-4,
            like_max_epochs: 1000,
            mcmc: McmcConfig::default(),
            flow: FlowArch::default(),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.rounds < 1 || self.n_sims == 0 || self.n_test_post == 0 {
            return Err(InferenceError::Config("rounds, n_sims and n_test_post must be positive".into()));
        }
        if !(self.lr_like > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(InferenceError::Config("need lr_like > 0 and lr_decay in (0, 1]".into()));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(InferenceError::Config("val_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn train_config(&self, round: usize) -> TrainConfig {
        TrainConfig {
            lr: exp_lr_decay(self.lr_like, self.lr_decay, round),
            batch_size: self.like_batch_size,
            patience: self.like_patience,
            min_delta: self.like_min_delta,
            val_frac: self.val_frac,
            max_epochs: self.like_max_epochs,
        }
    }
}

pub struct SnlOutput {
    pub likelihood: ConditionalFlow,
    pub rounds: Vec<RoundRecord>,
    /// Chain ends after the last evaluation run.
    pub chain_states: Tensor,
}

/// Batched `log likelihood(x_obs | theta) + log prior(theta)`; rows outside
/// the prior support get `-inf` without touching the flow.
pub fn snl_log_target<'a>(
    likelihood: &'a ConditionalFlow,
    prior: &'a Prior,
    x_obs: &'a Tensor,
) -> impl FnMut(&Tensor) -> Vec<f64> + 'a {
    move |theta: &Tensor| {
        let lp: Vec<f64> = theta.iter_rows().map(|r| prior.log_density(r)).collect();
        let inside: Vec<usize> = (0..theta.rows()).filter(|&k| lp[k].is_finite()).collect();
        let mut out = vec![f64::NEG_INFINITY; theta.rows()];
        if inside.is_empty() {
            return out;
        }
        let ctx = theta.select_rows(&inside);
        match likelihood.log_prob_values(&x_obs.repeat_row(inside.len()), Some(&ctx)) {
            Ok(ll) => {
                for (j, &k) in inside.iter().enumerate() {
                    let v = ll[j] + lp[k];
                    out[k] = if v.is_nan() { f64::NEG_INFINITY } else { v };
                }
            }
            Err(_) => {}
        }
        out
    }
}

/// Chains that start from the prior mean, or from where the last run ended.
fn chain_init(prior: &Prior, previous: Option<&Tensor>) -> Tensor {
    match previous {
        Some(t) => t.clone(),
        None => Tensor::row(&prior.mean()),
    }
}

/// Bootstrap draws from the last usable proposal sample.
fn resample(previous: &Tensor, n: usize, rng: &mut impl Rng) -> Tensor {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..previous.rows())).collect();
    previous.select_rows(&idx)
}

/// Sequential neural likelihood: the round-`r` proposal is the prior for
/// `r = 1`, otherwise MCMC on `likelihood(x_obs | .) prior` with the flow
/// from round `r - 1`.
pub fn snl_run(cfg: &SnlConfig, simulator: &dyn Simulator, x_obs: &[f64]) -> Result<SnlOutput, InferenceError> {
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
    let mut sim_rng = stream(cfg.seed, STREAM_SIMULATE);
    let mut init_rng = stream(cfg.seed, STREAM_FLOW_INIT);
    let mut mcmc_rng = stream(cfg.seed, STREAM_MCMC);

    let x_obs_t = Tensor::row(x_obs);

    // round 1 simulates from the prior before the flow exists, so its fixed
    // standardization can come from those pairs
    let t0 = Instant::now();
    let first = prior.sample_n(cfg.n_sims, &mut sim_rng);
    let mut thetas: Vec<f64> = Vec::with_capacity(cfg.rounds * cfg.n_sims * d);
    let mut xs: Vec<f64> = Vec::with_capacity(cfg.rounds * cfg.n_sims * p);
    simulate_into(simulator, &first, &mut sim_rng, &mut thetas, &mut xs);
    let first_sim_time = t0.elapsed().as_secs_f64();
    let like_cfg = FlowConfig::new(p, d)
        .with_layers(cfg.flow.n_layers, cfg.flow.hidden.clone())
        .with_context_norm(Standardization::from_rows(&first))
        .with_target_norm(Standardization::from_rows(&Tensor::new(cfg.n_sims, p, xs.clone())?));
    let mut likelihood = ConditionalFlow::new(like_cfg, &mut init_rng)?;
    let mut adam = Adam::new(likelihood.params());

    let mut records: Vec<RoundRecord> = Vec::new();
    let mut chains: Option<Tensor> = None;
    let mut last_proposal = first;

    for r in 1..=cfg.rounds {
        let mut rec = RoundRecord::new(r, if r == 1 { 1.0 } else { 0.0 });
        if r == 1 {
            rec.timings.simulate = first_sim_time;
        } else {
            let t0 = Instant::now();
            let target = snl_log_target(&likelihood, prior, &x_obs_t);
            let proposal = match mcmc_sample(target, &chain_init(prior, chains.as_ref()), cfg.n_sims, &cfg.mcmc, &mut mcmc_rng) {
                Ok(out) => {
                    chains = Some(out.final_states);
                    out.samples
                }
                Err(_) => {
                    rec.degrade();
                    resample(&last_proposal, cfg.n_sims, &mut mcmc_rng)
                }
            };
            rec.timings.sample = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            simulate_into(simulator, &proposal, &mut sim_rng, &mut thetas, &mut xs);
            last_proposal = proposal;
            rec.timings.simulate = t1.elapsed().as_secs_f64();
        }
        let n_total = xs.len() / p;
        rec.dataset_size = n_total;

        let t2 = Instant::now();
        let theta_t = Tensor::new(n_total, d, thetas.clone())?;
        let x_t = Tensor::new(n_total, p, xs.clone())?;
        let rep = train_with_optimizers(
            &mut likelihood,
            None,
            &theta_t,
            &x_t,
            &cfg.train_config(r),
            &mut init_rng,
            &mut adam,
            None,
        )?;
        rec.like_train_loss = rep.train_loss;
        rec.like_val_loss = rep.val_loss;
        if rep.degraded {
            rec.degrade();
        }
        rec.timings.train_like = t2.elapsed().as_secs_f64();

        // evaluation draws from the posterior implied by this round's flow
        let t3 = Instant::now();
        let target = snl_log_target(&likelihood, prior, &x_obs_t);
        match mcmc_sample(target, &chain_init(prior, chains.as_ref()), cfg.n_test_post, &cfg.mcmc, &mut mcmc_rng) {
            Ok(out) => {
                chains = Some(out.final_states);
                rec.samples = out.samples;
            }
            Err(_) => {
                rec.degrade();
                rec.samples = resample(&last_proposal, cfg.n_test_post, &mut mcmc_rng);
            }
        }
        rec.timings.sample += t3.elapsed().as_secs_f64();
        records.push(rec);
    }
    Ok(SnlOutput {
        likelihood,
        rounds: records,
        chain_states: chains.unwrap_or_else(|| Tensor::row(&prior.mean())),
    })
}
