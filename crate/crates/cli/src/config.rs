//! Experiment configuration: one JSON file selects an experiment and a
//! method, and overrides any of the method's default settings.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use snpla_core::inference::{SmcAbcConfig, SnlConfig, SnplaConfig};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    MvgFive,
    MvgSummary,
    MvgLearned,
    TwoMoons,
    LotkaVolterra,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::MvgFive,
        Experiment::MvgSummary,
        Experiment::MvgLearned,
        Experiment::TwoMoons,
        Experiment::LotkaVolterra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::MvgFive => "mvg_five",
            Experiment::MvgSummary => "mvg_summary",
            Experiment::MvgLearned => "mvg_learned",
            Experiment::TwoMoons => "two_moons",
            Experiment::LotkaVolterra => "lotka_volterra",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    pub fn is_mvg(self) -> bool {
        matches!(self, Experiment::MvgFive | Experiment::MvgSummary | Experiment::MvgLearned)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Snpla,
    Snl,
    Smcabc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Snpla, Method::Snl, Method::Smcabc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Snpla => "snpla",
            Method::Snl => "snl",
            Method::Smcabc => "smcabc",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// SMC-ABC settings plus the number of evaluation draws taken from each
/// generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbcBlock {
    pub n_particles: usize,
    pub max_sims: u64,
    pub initial_quantile: f64,
    pub eps_quantile: f64,
    pub kernel_scale: f64,
    pub min_eps_reduction: f64,
    pub n_test_post: usize,
}

impl AbcBlock {
    pub fn new(sampler: SmcAbcConfig, n_test_post: usize) -> Self {
        Self {
            n_particles: sampler.n_particles,
            max_sims: sampler.max_sims,
            initial_quantile: sampler.initial_quantile,
            eps_quantile: sampler.eps_quantile,
            kernel_scale: sampler.kernel_scale,
            min_eps_reduction: sampler.min_eps_reduction,
            n_test_post,
        }
    }

    pub fn sampler(&self) -> SmcAbcConfig {
        SmcAbcConfig {
            n_particles: self.n_particles,
            max_sims: self.max_sims,
            initial_quantile: self.initial_quantile,
            eps_quantile: self.eps_quantile,
            kernel_scale: self.kernel_scale,
            min_eps_reduction: self.min_eps_reduction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbcRunner {
    /// Exact conjugate posterior (MV-G experiments only).
    Analytic,
    /// The configured inference method, rerun for every replicate.
    Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbcSettings {
    pub replicates: usize,
    pub posterior_draws: usize,
    pub runner: SbcRunner,
}

impl Default for SbcSettings {
    fn default() -> Self {
        Self {
            replicates: 100,
            posterior_draws: 20,
            runner: SbcRunner::Analytic,
        }
    }
}

fn default_n_seeds() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub method: Method,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    /// Run `i` uses seed `seed + i`; the `seed` inside method blocks is
    /// replaced by it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Fixes the observed data (and the LV pilot standardizer).
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_true")]
    pub two_moons_radial_first: bool,
    /// Likelihood-flow draws to write per run; 0 writes none.
    #[serde(default)]
    pub likelihood_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snpla: Option<SnplaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snl: Option<SnlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smcabc: Option<AbcBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbc: Option<SbcSettings>,
}

/// Published defaults for SNPLA on each experiment.
pub fn snpla_defaults(experiment: Experiment) -> SnplaConfig {
    match experiment {
        Experiment::MvgFive | Experiment::MvgSummary | Experiment::MvgLearned => {
            let n_post = if experiment == Experiment::MvgSummary { 10_000 } else { 40_000 };
            let mut c = SnplaConfig::new(10, 2500, n_post);
            c.lr_like = 0.001;
            c.lr_post = 0.002;
            c.gamma_post = 0.95;
            c.lambda = 0.7;
            c.use_summary_net = experiment == Experiment::MvgLearned;
            c
        }
        Experiment::TwoMoons => {
            let mut c = SnplaConfig::new(10, 1000, 60_000);
            c.lr_like = 0.001;
            c.lr_post = 0.001;
            c.gamma_post = 0.9;
            c.lambda = 0.7;
            c
        }
        Experiment::LotkaVolterra => {
            let mut c = SnplaConfig::new(5, 1000, 10_000);
            c.lr_like = 0.001;
            c.lr_post = 0.001;
            c.gamma_post = 0.9;
            c.lambda = 0.9;
            c
        }
    }
}

pub fn snl_defaults(experiment: Experiment) -> SnlConfig {
    match experiment {
        Experiment::TwoMoons => SnlConfig::new(10, 1000),
        Experiment::LotkaVolterra => {
            let mut c = SnlConfig::new(5, 1000);
            c.lr_decay = 0.98;
            c
        }
        _ => SnlConfig::new(10, 2500),
    }
}

pub fn smcabc_defaults(experiment: Experiment) -> AbcBlock {
    let sampler = match experiment {
        Experiment::TwoMoons => SmcAbcConfig::new(2000, 10_000),
        Experiment::LotkaVolterra => SmcAbcConfig::new(1000, 50_000),
        _ => SmcAbcConfig::new(1000, 1_000_000),
    };
    AbcBlock::new(sampler, 1000)
}

fn default_block(experiment: Experiment, method: Method) -> Value {
    match method {
        Method::Snpla => serde_json::to_value(snpla_defaults(experiment)),
        Method::Snl => serde_json::to_value(snl_defaults(experiment)),
        Method::Smcabc => serde_json::to_value(smcabc_defaults(experiment)),
    }
    .expect("defaults serialize")
}

/// Objects merge key by key; anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn names<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str) -> String {
    all.iter().map(|&t| format!("`{}`", name(t))).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Parses JSON text, fills every method block present from the
    /// experiment's defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| config_error("$", e.to_string()))?;
        let Value::Object(mut obj) = raw else {
            return Err(config_error("$", "expected a JSON object"));
        };
        let experiment = match obj.get("experiment") {
            Some(Value::String(s)) => Experiment::parse(s).ok_or_else(|| {
                config_error(
                    "experiment",
                    format!("unknown experiment `{s}`, expected one of {}", names(&Experiment::ALL, Experiment::name)),
                )
            })?,
            Some(_) => return Err(config_error("experiment", "expected a string")),
            None => return Err(config_error("experiment", "missing field")),
        };
        let method = match obj.get("method") {
            Some(Value::String(s)) => Method::parse(s).ok_or_else(|| {
                config_error(
                    "method",
                    format!("unknown method `{s}`, expected one of {}", names(&Method::ALL, Method::name)),
                )
            })?,
            Some(_) => return Err(config_error("method", "expected a string")),
            None => return Err(config_error("method", "missing field")),
        };
        if !obj.contains_key(method.name()) {
            return Err(config_error(
                method.name(),
                format!("method `{method}` needs a `{method}` block (`{{}}` keeps every default)"),
            ));
        }
        for m in Method::ALL {
            if let Some(user) = obj.remove(m.name()) {
                if !user.is_object() {
                    return Err(config_error(m.name(), "expected an object"));
                }
                let mut block = default_block(experiment, m);
                merge(&mut block, user);
                obj.insert(m.name().to_string(), block);
            }
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Object(obj))
            .map_err(|e| config_error(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error("$", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Published defaults for one experiment and method.
    pub fn with_defaults(experiment: Experiment, method: Method) -> Self {
        let text = format!(r#"{{"experiment":"{experiment}","method":"{method}","{method}":{{}}}}"#);
        Self::parse(&text).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_seeds == 0 {
            return Err(config_error("n_seeds", "must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(config_error("output_dir", "must not be empty"));
        }
        if let Some(c) = &self.snpla {
            c.validate().map_err(|e| config_error("snpla", e.to_string()))?;
            if c.use_summary_net && !matches!(self.experiment, Experiment::MvgFive | Experiment::MvgLearned) {
                return Err(config_error(
                    "snpla.use_summary_net",
                    "the summary network needs raw 2-d observations (mvg_five or mvg_learned)",
                ));
            }
        }
        if let Some(c) = &self.snl {
            c.validate().map_err(|e| config_error("snl", e.to_string()))?;
        }
        if let Some(c) = &self.smcabc {
            if c.n_test_post == 0 {
                return Err(config_error("smcabc.n_test_post", "must be positive"));
            }
        }
        if let Some(s) = &self.sbc {
            if s.posterior_draws == 0 {
                return Err(config_error("sbc.posterior_draws", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Git-style content hash: the first 16 hex digits of
    /// `sha256("blob <len>\0" + snapshot)`. The output directory is left
    /// out, so the same experiment hashes the same wherever it is written.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let blob = c.to_json();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", blob.len()).as_bytes());
        h.update(blob.as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-{}-s{seed}", self.experiment, self.method)
    }

    /// Method block for `method`, from the config or the defaults.
    pub fn snpla_or_default(&self) -> SnplaConfig {
        self.snpla.clone().unwrap_or_else(|| snpla_defaults(self.experiment))
    }

    pub fn snl_or_default(&self) -> SnlConfig {
        self.snl.clone().unwrap_or_else(|| snl_defaults(self.experiment))
    }

    pub fn smcabc_or_default(&self) -> AbcBlock {
        self.smcabc.clone().unwrap_or_else(|| smcabc_defaults(self.experiment))
    }
}

/// Top-level keys accepted in a config file, used by the schema check.
pub fn top_level_keys() -> Vec<String> {
    let mut cfg = ExperimentConfig::with_defaults(Experiment::MvgSummary, Method::Snpla);
    cfg.snl = Some(snl_defaults(cfg.experiment));
    cfg.smcabc = Some(smcabc_defaults(cfg.experiment));
    cfg.sbc = Some(SbcSettings::default());
    match serde_json::to_value(&cfg).expect("serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

/// Keys of each method block and nested object, for the schema check.
pub fn block_keys() -> Vec<(String, Vec<String>)> {
    fn keys(v: &Value) -> Vec<String> {
        v.as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default()
    }
    let e = Experiment::MvgSummary;
    let snpla = serde_json::to_value(snpla_defaults(e)).expect("serializes");
    let snl = serde_json::to_value(snl_defaults(e)).expect("serializes");
    let abc = serde_json::to_value(smcabc_defaults(e)).expect("serializes");
    let sbc = serde_json::to_value(SbcSettings::default()).expect("serializes");
    vec![
        ("snpla".into(), keys(&snpla)),
        ("snl".into(), keys(&snl)),
        ("smcabc".into(), keys(&abc)),
        ("sbc".into(), keys(&sbc)),
        ("flow".into(), keys(&snpla["flow"])),
        ("mcmc".into(), keys(&snl["mcmc"])),
    ]
}
