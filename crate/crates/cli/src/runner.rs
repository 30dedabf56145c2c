//! One seed of one experiment: inference, per-round metrics, artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use snpla_core::autodiff::Tensor;
use snpla_core::flows::ConditionalFlow;
use snpla_core::inference::{
    smcabc_run, snl_run, snpla_run, RoundRecord, RoundStatus, RoundTimings, SmcAbcOutput,
};
use snpla_core::models::{CountingSimulator, DeepSets};
use snpla_core::rng::{stream, STREAM_ABC};

use crate::artifacts::{self, Manifest, MetricRow};
use crate::config::{ExperimentConfig, Method};
use crate::problem::Problem;
use crate::HarnessError;

/// Stream for the evaluation draws taken from SMC-ABC generations and for
/// likelihood-flow samples.
pub const STREAM_EVAL: &str = "evaluation";

/// Everything a finished seed produced.
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub simulator_calls: u64,
    pub simulation_budget: u64,
    pub likelihood: Option<ConditionalFlow>,
    pub posterior: Option<ConditionalFlow>,
    pub summary_net: Option<DeepSets>,
    /// Parameter and data rows drawn from the likelihood flow, when asked.
    pub likelihood_samples: Option<(Tensor, Tensor)>,
}

impl RunResult {
    pub fn final_samples(&self) -> Option<&Tensor> {
        self.records.last().map(|r| &r.samples)
    }

    pub fn final_metric(&self, name: &str) -> Option<f64> {
        self.records.last().and_then(|r| r.metrics.get(name).copied())
    }
}

fn abc_records(out: &SmcAbcOutput, n_test: usize, seed: u64) -> Vec<RoundRecord> {
    let mut rng = stream(seed, STREAM_EVAL);
    out.generations
        .iter()
        .enumerate()
        .map(|(g, gen)| RoundRecord {
            round: g + 1,
            // generation 0 is drawn from the prior, later ones from particles
            alpha: if g == 0 { 1.0 } else { 0.0 },
            dataset_size: gen.n_simulations as usize,
            like_train_loss: Vec::new(),
            like_val_loss: Vec::new(),
            post_loss: Vec::new(),
            post_val_loss: Vec::new(),
            status: RoundStatus::Ok,
            timings: RoundTimings::default(),
            samples: gen.resample(n_test, &mut rng),
            metrics: BTreeMap::new(),
        })
        .collect()
}

/// Runs seed `seed` without touching the file system.
pub fn execute(cfg: &ExperimentConfig, problem: &Problem, seed: u64) -> Result<RunResult, HarnessError> {
    let counting = CountingSimulator::new(problem.simulator.as_ref());
    let x_obs = &problem.x_obs;
    let mut result = RunResult {
        run_id: cfg.run_id(seed),
        seed,
        records: Vec::new(),
        simulator_calls: 0,
        simulation_budget: 0,
        likelihood: None,
        posterior: None,
        summary_net: None,
        likelihood_samples: None,
    };
    match cfg.method {
        Method::Snpla => {
            let mut c = cfg.snpla_or_default();
            c.seed = seed;
            let out = snpla_run(&c, &counting, x_obs)?;
            result.simulation_budget = (c.rounds * c.n_sims) as u64;
            result.records = out.rounds;
            result.likelihood = Some(out.likelihood);
            result.posterior = Some(out.posterior);
            result.summary_net = out.summary_net;
        }
        Method::Snl => {
            let mut c = cfg.snl_or_default();
            c.seed = seed;
            let out = snl_run(&c, &counting, x_obs)?;
            result.simulation_budget = (c.rounds * c.n_sims) as u64;
            result.records = out.rounds;
            result.likelihood = Some(out.likelihood);
        }
        Method::Smcabc => {
            let block = cfg.smcabc_or_default();
            let mut rng = stream(seed, STREAM_ABC);
            let out = smcabc_run(&counting, x_obs, &block.sampler(), &mut rng)?;
            result.simulation_budget = block.max_sims;
            result.records = abc_records(&out, block.n_test_post, seed);
        }
    }
    result.simulator_calls = counting.calls();
    let within = match cfg.method {
        Method::Smcabc => result.simulator_calls <= result.simulation_budget,
        _ => result.simulator_calls == result.simulation_budget,
    };
    if !within {
        return Err(HarnessError::Budget {
            used: result.simulator_calls,
            budget: result.simulation_budget,
        });
    }
    for rec in &mut result.records {
        let metrics = match problem.metrics(&rec.samples) {
            Ok(m) => m,
            // a collapsed sample set has no usable metric
            Err(_) => vec![(problem.primary_metric(), f64::NAN)],
        };
        rec.metrics = metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    }
    if cfg.likelihood_samples > 0 {
        if let (Some(flow), Some(last)) = (&result.likelihood, result.final_samples()) {
            let mut rng = stream(seed, STREAM_EVAL);
            let thetas = problem.likelihood_thetas(cfg.likelihood_samples, last, &mut rng)?;
            let mut xs = Vec::with_capacity(thetas.rows() * flow.dim());
            for t in thetas.iter_rows() {
                let (x, _) = flow.sample_values(1, Some(t), &mut rng)?;
                xs.extend_from_slice(x.data());
            }
            let xs = Tensor::new(thetas.rows(), flow.dim(), xs)?;
            result.likelihood_samples = Some((thetas, xs));
        }
    }
    Ok(result)
}

pub fn run_dir(root: &Path, run_id: &str) -> PathBuf {
    root.join(run_id)
}

/// Writes one seed's directory.
pub fn write_run(root: &Path, cfg: &ExperimentConfig, hash: &str, r: &RunResult) -> Result<(), HarnessError> {
    let dir = run_dir(root, &r.run_id);
    artifacts::ensure_dir(&dir.join(artifacts::CHECKPOINT_DIR))?;
    artifacts::write_text(&dir.join(artifacts::CONFIG_FILE), &cfg.to_json())?;
    let rows: Vec<MetricRow<'_>> = r
        .records
        .iter()
        .map(|record| MetricRow {
            run_id: &r.run_id,
            seed: r.seed,
            record,
        })
        .collect();
    artifacts::write_metrics(&dir.join(artifacts::METRICS_FILE), hash, &rows)?;
    artifacts::write_rounds_jsonl(&dir.join(artifacts::ROUNDS_FILE), &r.run_id, hash, &r.records)?;
    for rec in &r.records {
        artifacts::write_samples(&dir.join(artifacts::posterior_file(rec.round)), &r.run_id, hash, rec.round, &rec.samples)?;
    }
    if let Some(f) = &r.likelihood {
        artifacts::save_flow(&dir, "likelihood", &r.run_id, hash, f)?;
    }
    if let Some(f) = &r.posterior {
        artifacts::save_flow(&dir, "posterior", &r.run_id, hash, f)?;
    }
    if let Some(n) = &r.summary_net {
        artifacts::save_summary_net(&dir, &r.run_id, hash, n)?;
    }
    if let Some((t, x)) = &r.likelihood_samples {
        artifacts::write_likelihood_samples(&dir.join(artifacts::LIKELIHOOD_SAMPLES_FILE), &r.run_id, hash, t, x)?;
    }
    artifacts::write_manifest(
        &dir,
        &Manifest {
            run_id: r.run_id.clone(),
            config_hash: hash.to_string(),
            experiment: cfg.experiment.to_string(),
            method: cfg.method.to_string(),
            seed: r.seed,
            simulator_calls: r.simulator_calls,
            simulation_budget: r.simulation_budget,
            rounds_completed: r.records.len(),
            error: None,
        },
    )
}

/// Records a failed seed next to where its outputs would have gone.
pub fn write_failure(root: &Path, cfg: &ExperimentConfig, hash: &str, seed: u64, err: &HarnessError) -> Result<(), HarnessError> {
    let run_id = cfg.run_id(seed);
    let dir = run_dir(root, &run_id);
    artifacts::ensure_dir(&dir)?;
    artifacts::write_text(&dir.join(artifacts::CONFIG_FILE), &cfg.to_json())?;
    let (calls, budget) = match err {
        HarnessError::Budget { used, budget } => (*used, *budget),
        _ => (0, 0),
    };
    artifacts::write_manifest(
        &dir,
        &Manifest {
            run_id,
            config_hash: hash.to_string(),
            experiment: cfg.experiment.to_string(),
            method: cfg.method.to_string(),
            seed,
            simulator_calls: calls,
            simulation_budget: budget,
            rounds_completed: 0,
            error: Some(err.to_string()),
        },
    )
}
