//! Subcommand implementations. Each returns a report; the binary turns it
//! into output and an exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use snpla_core::autodiff::{Graph, Tensor};
use snpla_core::checks::{run_battery, BatteryReport};
use snpla_core::inference::{mcmc_sample, smcabc_run, snl_log_target, snl_run, snpla_run};
use snpla_core::metrics::{sbc, SbcResult, SBC_MIN_REPLICATES};
use snpla_core::models::{DeepSets, Simulator};
use snpla_core::rng::{stream, STREAM_ABC, STREAM_MCMC};

use crate::artifacts::{self, csv_writer, fmt_f64, io_err, MetricRow};
use crate::config::{ExperimentConfig, Method, SbcRunner};
use crate::problem::{mvg_posterior_for, Problem};
use crate::runner::{execute, run_dir, write_failure, write_run, RunResult};
use crate::HarnessError;

/// Stream for SBC replicates, keyed by the run seed.
pub const STREAM_SBC: &str = "sbc";
/// Stream for flow draws in the timing comparison.
pub const STREAM_TIMING: &str = "timing";
/// Repetitions behind each timing median.
pub const TIMING_REPS: usize = 5;
/// Largest allowed ratio between any sweep point's final metric and the best.
pub const SWEEP_SPREAD: f64 = 5.0;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Worker pool of `jobs` threads (default: available parallelism).
pub fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, HarnessError> {
    if jobs == Some(0) {
        return Err(HarnessError::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Usage(format!("thread pool: {e}")))
}

fn prepare_root(root: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(root).map_err(|e| HarnessError::Config {
        path: "output_dir".into(),
        message: format!("{} is not writable: {e}", root.display()),
    })
}

pub struct RunReport {
    pub root: PathBuf,
    pub config_hash: String,
    /// Successful seeds in seed order.
    pub results: Vec<RunResult>,
    pub failures: Vec<(u64, String)>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_PARTIAL
        }
    }
}

/// Runs every seed, writing one directory per seed plus `config.json` and
/// an aggregated `metrics.csv` at the root.
pub fn cmd_run(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<RunReport, HarnessError> {
    let problem = Problem::build(cfg)?;
    let pool = pool(jobs)?;
    run_with(cfg, &problem, &pool)
}

fn run_with(cfg: &ExperimentConfig, problem: &Problem, pool: &rayon::ThreadPool) -> Result<RunReport, HarnessError> {
    let root = cfg.output_dir.clone();
    prepare_root(&root)?;
    let hash = cfg.content_hash();
    artifacts::write_text(&root.join(artifacts::CONFIG_FILE), &cfg.to_json())?;
    let outcomes: Vec<(u64, Result<RunResult, HarnessError>)> = pool.install(|| {
        cfg.seeds()
            .into_par_iter()
            .map(|seed| {
                let r = execute(cfg, problem, seed).and_then(|r| write_run(&root, cfg, &hash, &r).map(|_| r));
                (seed, r)
            })
            .collect()
    });
    let mut report = RunReport {
        root: root.clone(),
        config_hash: hash.clone(),
        results: Vec::new(),
        failures: Vec::new(),
    };
    for (seed, r) in outcomes {
        match r {
            Ok(r) => report.results.push(r),
            Err(e) => {
                write_failure(&root, cfg, &hash, seed, &e)?;
                report.failures.push((seed, e.to_string()));
            }
        }
    }
    let rows: Vec<MetricRow<'_>> = report
        .results
        .iter()
        .flat_map(|r| {
            r.records.iter().map(move |record| MetricRow {
                run_id: &r.run_id,
                seed: r.seed,
                record,
            })
        })
        .collect();
    artifacts::write_metrics(&root.join(artifacts::METRICS_FILE), &hash, &rows)?;
    Ok(report)
}

fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub metric: String,
    /// Median over seeds of the final-round metric.
    pub final_metric: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub ratio_to_best: f64,
    pub within_spread: bool,
}

pub struct SweepReport {
    pub root: PathBuf,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn all_within(&self) -> bool {
        self.points.iter().all(|p| p.within_spread && p.n_failed == 0)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_within() {
            EXIT_OK
        } else {
            EXIT_PARTIAL
        }
    }
}

/// One run per `lambda` (and seed) on the same observed data, each in
/// `<output_dir>/lambda_<value>`, summarized in `sweep.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, lambdas: &[f64], jobs: Option<usize>) -> Result<SweepReport, HarnessError> {
    if cfg.method != Method::Snpla {
        return Err(HarnessError::Usage("the lambda sweep needs method `snpla`".into()));
    }
    if lambdas.is_empty() {
        return Err(HarnessError::Usage("the lambda list is empty".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(HarnessError::Usage(format!("lambda must be positive and finite, got {bad}")));
    }
    let root = cfg.output_dir.clone();
    prepare_root(&root)?;
    let problem = Problem::build(cfg)?;
    let pool = pool(jobs)?;
    let metric = problem.primary_metric().to_string();
    let mut points = Vec::new();
    let mut hashes = Vec::new();
    for &lambda in lambdas {
        let mut sub = cfg.clone();
        let mut block = cfg.snpla_or_default();
        block.lambda = lambda;
        sub.snpla = Some(block);
        sub.output_dir = root.join(format!("lambda_{lambda}"));
        let rep = run_with(&sub, &problem, &pool)?;
        let finals: Vec<f64> = rep.results.iter().filter_map(|r| r.final_metric(&metric)).collect();
        points.push(SweepPoint {
            lambda,
            metric: metric.clone(),
            final_metric: if finals.is_empty() { f64::NAN } else { median(&finals) },
            n_ok: rep.results.len(),
            n_failed: rep.failures.len(),
            ratio_to_best: f64::NAN,
            within_spread: false,
        });
        hashes.push(rep.config_hash);
    }
    // KL and W1 are positive with 0 best; the LV score has no natural zero,
    // so only finiteness is checked there
    let ratio_metric = metric == "kl" || metric == "w1";
    let best = points
        .iter()
        .map(|p| p.final_metric)
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    for p in &mut points {
        let finite = p.final_metric.is_finite();
        if ratio_metric {
            p.ratio_to_best = p.final_metric / best;
            p.within_spread = finite && p.ratio_to_best <= SWEEP_SPREAD;
        } else {
            p.within_spread = finite;
        }
    }
    let path = root.join(artifacts::SWEEP_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record([
        "run_id",
        "config_hash",
        "lambda",
        "metric_name",
        "final_metric",
        "n_ok",
        "n_failed",
        "ratio_to_best",
        "within_spread",
    ])?;
    for (p, h) in points.iter().zip(&hashes) {
        w.write_record([
            &format!("{}-{}-lambda{}", cfg.experiment, cfg.method, p.lambda),
            h.as_str(),
            &fmt_f64(p.lambda),
            &p.metric,
            &fmt_f64(p.final_metric),
            &p.n_ok.to_string(),
            &p.n_failed.to_string(),
            &fmt_f64(p.ratio_to_best),
            &p.within_spread.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(SweepReport { root, points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub n_draws: usize,
    pub snpla_median_sec: f64,
    pub snl_median_sec: f64,
}

impl TimingReport {
    /// How many times faster flow sampling is than MCMC.
    pub fn ratio(&self) -> f64 {
        self.snl_median_sec / self.snpla_median_sec
    }
}

/// The config switched to `method`, single seed, with the method's block
/// from the config or the defaults.
fn with_method(cfg: &ExperimentConfig, method: Method) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.method = method;
    c.n_seeds = 1;
    match method {
        Method::Snpla => c.snpla = Some(cfg.snpla_or_default()),
        Method::Snl => c.snl = Some(cfg.snl_or_default()),
        Method::Smcabc => c.smcabc = Some(cfg.smcabc_or_default()),
    }
    c
}

/// Trains `method` for `cfg.seed` into its run directory unless its
/// checkpoint is already there.
fn ensure_trained(
    cfg: &ExperimentConfig,
    problem: &Problem,
    method: Method,
    checkpoint: &str,
    train_missing: bool,
) -> Result<PathBuf, HarnessError> {
    let sub = with_method(cfg, method);
    let dir = run_dir(&cfg.output_dir, &sub.run_id(cfg.seed));
    let path = artifacts::checkpoint_path(&dir, checkpoint);
    if !path.exists() {
        if !train_missing {
            return Err(HarnessError::MissingCheckpoint(path));
        }
        let r = execute(&sub, problem, cfg.seed)?;
        write_run(&cfg.output_dir, &sub, &sub.content_hash(), &r)?;
    }
    Ok(dir)
}

fn observed_context(net: Option<&DeepSets>, x_obs: &[f64]) -> Result<Vec<f64>, HarnessError> {
    Ok(match net {
        Some(n) => {
            let mut g = Graph::no_grad();
            let s = n.forward_flat(&mut g, &Tensor::row(x_obs))?;
            g.value(s).data().to_vec()
        }
        None => x_obs.to_vec(),
    })
}

/// Median wall-clock time for `n_draws` posterior draws: SNPLA by pushing
/// noise through the posterior flow, SNL by adaptive MCMC on the learned
/// likelihood (burn-in and thinning included). Writes `timing.csv`.
pub fn cmd_timing(cfg: &ExperimentConfig, n_draws: usize, train_missing: bool) -> Result<TimingReport, HarnessError> {
    if n_draws == 0 {
        return Err(HarnessError::Usage("n_draws must be at least 1".into()));
    }
    prepare_root(&cfg.output_dir)?;
    let problem = Problem::build(cfg)?;
    let snpla_dir = ensure_trained(cfg, &problem, Method::Snpla, "posterior", train_missing)?;
    let snl_dir = ensure_trained(cfg, &problem, Method::Snl, "likelihood", train_missing)?;
    let posterior = artifacts::load_flow(&artifacts::checkpoint_path(&snpla_dir, "posterior"))?;
    let net = artifacts::load_summary_net(&artifacts::checkpoint_path(&snpla_dir, "summary_net"))?;
    let likelihood = artifacts::load_flow(&artifacts::checkpoint_path(&snl_dir, "likelihood"))?;
    let ctx = observed_context(net.as_ref(), &problem.x_obs)?;
    let snl_cfg = cfg.snl_or_default();
    let prior = problem.simulator.prior();
    let x_obs = Tensor::row(&problem.x_obs);

    let mut flow_rng = stream(cfg.seed, STREAM_TIMING);
    let mut flow_times = Vec::with_capacity(TIMING_REPS);
    for _ in 0..TIMING_REPS {
        let t = Instant::now();
        let (s, _) = posterior.sample_values(n_draws, Some(&ctx), &mut flow_rng)?;
        flow_times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(s);
    }
    let mut mcmc_rng = stream(cfg.seed, STREAM_MCMC);
    let mut mcmc_times = Vec::with_capacity(TIMING_REPS);
    for _ in 0..TIMING_REPS {
        let t = Instant::now();
        let target = snl_log_target(&likelihood, prior, &x_obs);
        let out = mcmc_sample(target, &Tensor::row(&prior.mean()), n_draws, &snl_cfg.mcmc, &mut mcmc_rng)?;
        mcmc_times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let report = TimingReport {
        n_draws,
        snpla_median_sec: median(&flow_times),
        snl_median_sec: median(&mcmc_times),
    };
    let path = cfg.output_dir.join(artifacts::TIMING_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["run_id", "config_hash", "method", "n_draws", "median_sec", "repetitions"])?;
    for (method, sec) in [(Method::Snpla, report.snpla_median_sec), (Method::Snl, report.snl_median_sec)] {
        let sub = with_method(cfg, method);
        w.write_record([
            &sub.run_id(cfg.seed),
            &sub.content_hash(),
            method.name(),
            &n_draws.to_string(),
            &fmt_f64(sec),
            &TIMING_REPS.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(report)
}

/// Posterior draws for one SBC replicate from the configured method.
fn method_draws(cfg: &ExperimentConfig, sim: &dyn Simulator, x: &[f64], l: usize, seed: u64) -> Result<Tensor, String> {
    let e = |e: &dyn std::fmt::Display| e.to_string();
    match cfg.method {
        Method::Snpla => {
            let mut c = cfg.snpla_or_default();
            c.seed = seed;
            let out = snpla_run(&c, sim, x).map_err(|x| e(&x))?;
            let ctx = out.observed_context(x).map_err(|x| e(&x))?;
            let mut rng = stream(seed, STREAM_TIMING);
            Ok(out.posterior.sample_values(l, Some(&ctx), &mut rng).map_err(|x| e(&x))?.0)
        }
        Method::Snl => {
            let mut c = cfg.snl_or_default();
            c.seed = seed;
            c.n_test_post = l;
            let out = snl_run(&c, sim, x).map_err(|x| e(&x))?;
            out.rounds.last().map(|r| r.samples.clone()).ok_or_else(|| "no rounds".to_string())
        }
        Method::Smcabc => {
            let block = cfg.smcabc_or_default();
            let mut rng = stream(seed, STREAM_ABC);
            let out = smcabc_run(sim, x, &block.sampler(), &mut rng).map_err(|x| e(&x))?;
            let last = out.generations.last().ok_or_else(|| "no generations".to_string())?;
            Ok(last.resample(l, &mut rng))
        }
    }
}

/// Simulation-based calibration with `k` replicates of `l` draws. Writes
/// `sbc_param<j>.csv` (j from 1) and `sbc_summary.csv`.
pub fn cmd_sbc(cfg: &ExperimentConfig, k: usize, l: usize) -> Result<SbcResult, HarnessError> {
    if k < SBC_MIN_REPLICATES {
        return Err(HarnessError::Usage(format!(
            "SBC needs at least {SBC_MIN_REPLICATES} replicates, got {k}"
        )));
    }
    if l == 0 {
        return Err(HarnessError::Usage("SBC needs at least one posterior draw".into()));
    }
    let settings = cfg.sbc.clone().unwrap_or_default();
    let root = cfg.output_dir.clone();
    prepare_root(&root)?;
    let problem = Problem::build(cfg)?;
    let mut rng = stream(cfg.seed, STREAM_SBC);
    let sim = problem.simulator.as_ref();
    let result = match settings.runner {
        SbcRunner::Analytic => {
            let variant = problem
                .mvg_variant()
                .ok_or_else(|| HarnessError::Usage("the analytic SBC runner exists only for the MV-G experiments".into()))?;
            sbc(
                sim,
                |x, l, rng| mvg_posterior_for(variant, x).sample(l, rng).map_err(|e| e.to_string()),
                k,
                l,
                &mut rng,
            )?
        }
        SbcRunner::Method => sbc(
            sim,
            |x, l, rng| method_draws(cfg, sim, x, l, rng.next_u64()),
            k,
            l,
            &mut rng,
        )?,
    };
    let hash = cfg.content_hash();
    let run_id = format!("{}-{}-sbc-s{}", cfg.experiment, cfg.method, cfg.seed);
    let (lo, hi) = result.band;
    for (j, h) in result.histograms.iter().enumerate() {
        let path = root.join(artifacts::sbc_file(j + 1));
        let mut w = csv_writer(&path)?;
        w.write_record(["run_id", "config_hash", "bin", "count", "lower_band", "upper_band"])?;
        for (b, c) in h.iter().enumerate() {
            w.write_record([&run_id, &hash, &b.to_string(), &c.to_string(), &lo.to_string(), &hi.to_string()])?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    let path = root.join("sbc_summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "run_id",
        "config_hash",
        "param",
        "chi2",
        "p_value",
        "bins_in_band",
        "n_bins",
        "replicates",
        "skipped",
    ])?;
    for j in 0..result.histograms.len() {
        w.write_record([
            &run_id,
            &hash,
            &(j + 1).to_string(),
            &fmt_f64(result.chi2[j]),
            &fmt_f64(result.p_values[j]),
            &result.bins_in_band(j).to_string(),
            &result.histograms[j].len().to_string(),
            &result.replicates.to_string(),
            &result.skipped.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(result)
}

/// The engine battery: per-op finite differences, the reference gradient
/// checks and flow invariants on random architectures.
pub fn cmd_gradcheck(seed: u64) -> BatteryReport {
    run_battery(seed)
}
