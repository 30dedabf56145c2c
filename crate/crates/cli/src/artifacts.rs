//! Run directory layout and file writers. Every file carries the run id
//! and the config content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snpla_core::autodiff::Tensor;
use snpla_core::flows::{Checkpoint, ConditionalFlow};
use snpla_core::inference::RoundRecord;
use snpla_core::models::DeepSets;

use crate::HarnessError;

pub const METRICS_HEADER: [&str; 12] = [
    "run_id",
    "seed",
    "round",
    "alpha",
    "metric_name",
    "metric_value",
    "config_hash",
    "status",
    "simulate_sec",
    "train_like_sec",
    "train_post_sec",
    "sample_sec",
];

/// Columns of `metrics.csv` that hold wall-clock times.
pub const TIMING_COLUMNS: [&str; 4] = ["simulate_sec", "train_like_sec", "train_post_sec", "sample_sec"];

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const LIKELIHOOD_SAMPLES_FILE: &str = "likelihood_samples.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn posterior_file(round: usize) -> String {
    format!("posterior_round{round}.csv")
}

pub fn sbc_file(param: usize) -> String {
    format!("sbc_param{param}.csv")
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

/// CSV writer with `\n` line ends and a fixed column count.
pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(false)
        .from_writer(file))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// What a run did, next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_hash: String,
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub simulator_calls: u64,
    /// Configured simulation budget (exact for the flow methods, an upper
    /// bound for SMC-ABC).
    pub simulation_budget: u64,
    pub rounds_completed: usize,
    pub error: Option<String>,
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), HarnessError> {
    write_text(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(m)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, HarnessError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// One metrics row per round and metric.
pub struct MetricRow<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    pub record: &'a RoundRecord,
}

pub fn write_metrics(path: &Path, config_hash: &str, rows: &[MetricRow<'_>]) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        let r = row.record;
        let status = serde_json::to_value(r.status)?;
        for (name, value) in &r.metrics {
            w.write_record([
                row.run_id,
                &row.seed.to_string(),
                &r.round.to_string(),
                &fmt_f64(r.alpha),
                name,
                &fmt_f64(*value),
                config_hash,
                status.as_str().unwrap_or("unknown"),
                &fmt_f64(r.timings.simulate),
                &fmt_f64(r.timings.train_like),
                &fmt_f64(r.timings.train_post),
                &fmt_f64(r.timings.sample),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_rounds_jsonl(path: &Path, run_id: &str, config_hash: &str, records: &[RoundRecord]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        let mut v = serde_json::to_value(r)?;
        let obj = v.as_object_mut().expect("record is an object");
        obj.insert("run_id".into(), run_id.into());
        obj.insert("config_hash".into(), config_hash.into());
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("{prefix}_{j}")).collect()
}

pub fn write_samples(path: &Path, run_id: &str, config_hash: &str, round: usize, samples: &Tensor) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["run_id".to_string(), "config_hash".into(), "round".into()];
    header.extend(numbered("theta", samples.cols()));
    w.write_record(&header)?;
    for row in samples.iter_rows() {
        let mut rec = vec![run_id.to_string(), config_hash.to_string(), round.to_string()];
        rec.extend(row.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_likelihood_samples(
    path: &Path,
    run_id: &str,
    config_hash: &str,
    thetas: &Tensor,
    xs: &Tensor,
) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["run_id".to_string(), "config_hash".into()];
    header.extend(numbered("theta", thetas.cols()));
    header.extend(numbered("x", xs.cols()));
    w.write_record(&header)?;
    for (t, x) in thetas.iter_rows().zip(xs.iter_rows()) {
        let mut rec = vec![run_id.to_string(), config_hash.to_string()];
        rec.extend(t.iter().chain(x).map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

/// Flow checkpoint tagged with its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowArtifact {
    pub run_id: String,
    pub config_hash: String,
    pub checkpoint: Checkpoint,
}

/// Summary network weights with the layer widths needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryNetArtifact {
    pub run_id: String,
    pub config_hash: String,
    pub elem_dim: usize,
    pub phi: Vec<usize>,
    pub rho: Vec<usize>,
    pub params: Vec<(String, Tensor)>,
}

impl SummaryNetArtifact {
    pub fn new(run_id: &str, config_hash: &str, net: &DeepSets) -> Self {
        let (phi, rho) = net.widths();
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            elem_dim: net.elem_dim(),
            phi,
            rho,
            params: net.params().to_named(),
        }
    }

    pub fn rebuild(&self) -> Result<DeepSets, HarnessError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = DeepSets::new(self.elem_dim, &self.phi, &self.rho, &mut rng);
        net.params_mut()
            .load_named(&self.params)
            .map_err(|e| HarnessError::Usage(format!("summary network checkpoint: {e}")))?;
        Ok(net)
    }
}

pub fn checkpoint_path(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("{name}.json"))
}

pub fn save_flow(run_dir: &Path, name: &str, run_id: &str, config_hash: &str, flow: &ConditionalFlow) -> Result<(), HarnessError> {
    let a = FlowArtifact {
        run_id: run_id.into(),
        config_hash: config_hash.into(),
        checkpoint: flow.to_checkpoint(),
    };
    write_text(&checkpoint_path(run_dir, name), &serde_json::to_string(&a)?)
}

pub fn load_flow(path: &Path) -> Result<ConditionalFlow, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let a: FlowArtifact = serde_json::from_str(&text)?;
    Ok(ConditionalFlow::from_checkpoint(&a.checkpoint)?)
}

pub fn save_summary_net(run_dir: &Path, run_id: &str, config_hash: &str, net: &DeepSets) -> Result<(), HarnessError> {
    let a = SummaryNetArtifact::new(run_id, config_hash, net);
    write_text(&checkpoint_path(run_dir, "summary_net"), &serde_json::to_string(&a)?)
}

pub fn load_summary_net(path: &Path) -> Result<Option<DeepSets>, HarnessError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let a: SummaryNetArtifact = serde_json::from_str(&text)?;
    Ok(Some(a.rebuild()?))
}
