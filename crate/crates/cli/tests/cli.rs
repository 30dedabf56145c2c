use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snpla_cli::artifacts::{read_manifest, METRICS_HEADER, TIMING_COLUMNS};
use snpla_cli::config::ExperimentConfig;

const TINY_SNPLA: &str = r#"{
  "experiment": "mvg_summary",
  "method": "snpla",
  "n_seeds": 2,
  "snpla": {
    "rounds": 2, "n_sims": 100, "n_post": 1000, "n_mini": 500, "n_test_post": 200,
    "like_max_epochs": 5, "flow": { "n_layers": 2, "hidden": [16] }
  },
  "snl": {
    "rounds": 1, "n_sims": 100, "n_test_post": 100, "like_max_epochs": 5,
    "mcmc": { "n_chains": 2, "burn_in": 50, "thinning": 1, "init_scale": 0.1, "target_accept": 0.234 },
    "flow": { "n_layers": 2, "hidden": [16] }
  }
}"#;

fn snpla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snpla")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// All rows with the wall-clock columns removed.
fn without_timings(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().flexible(false).from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !TIMING_COLUMNS.contains(&header[i].as_str())).collect();
    let mut rows = vec![keep.iter().map(|&i| header[i].clone()).collect()];
    for rec in r.records() {
        let rec = rec.unwrap();
        rows.push(keep.iter().map(|&i| rec[i].to_string()).collect());
    }
    rows
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            csv_files(&p, out);
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
}

fn run_tiny(tmp: &Path, out: &str) -> (Output, PathBuf) {
    let cfg = write_config(tmp, "tiny.json", TINY_SNPLA);
    let out = tmp.join(out);
    let o = snpla(&["run", "--config", s(&cfg), "--out", s(&out), "--jobs", "1"]);
    (o, out)
}

#[test]
fn unknown_experiment_exits_1_listing_names() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"experiment":"hodgkin_huxley","method":"snpla","snpla":{}}"#);
    let o = snpla(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for name in ["mvg_five", "mvg_summary", "mvg_learned", "two_moons", "lotka_volterra"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_block_and_bad_field_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", r#"{"experiment":"two_moons","method":"snl"}"#);
    let o = snpla(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("snl"));
    let cfg = write_config(tmp.path(), "b.json", r#"{"experiment":"two_moons","method":"snpla","snpla":{"n_sim":5}}"#);
    let o = snpla(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("snpla.n_sim"), "{}", stderr(&o));
    let o = snpla(&["run", "--config", s(&tmp.path().join("absent.json"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_tiny(tmp.path(), "a");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (o2, out2) = run_tiny(tmp.path(), "b");
    assert_eq!(code(&o2), 0);

    let metrics = without_timings(&out.join("metrics.csv"));
    assert_eq!(metrics, without_timings(&out2.join("metrics.csv")));
    // header plus 2 rounds x 2 seeds, one KL row each
    assert_eq!(metrics.len(), 1 + 4);
    let header = csv::Reader::from_path(out.join("metrics.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), METRICS_HEADER.to_vec());

    let snapshot = ExperimentConfig::load(&out.join("config.json")).unwrap();
    let mut original = ExperimentConfig::parse(TINY_SNPLA).unwrap();
    original.output_dir = out.clone();
    assert_eq!(snapshot, original);
    let hash = original.content_hash();

    for seed in [0, 1] {
        let dir = out.join(format!("mvg_summary-snpla-s{seed}"));
        for f in ["config.json", "rounds.jsonl", "metrics.csv", "posterior_round1.csv", "posterior_round2.csv"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        for f in ["likelihood.json", "posterior.json"] {
            assert!(dir.join("checkpoints").join(f).exists(), "{f}");
        }
        let m = read_manifest(&dir).unwrap();
        assert_eq!(m.simulator_calls, 200);
        assert_eq!(m.simulation_budget, 200);
        assert_eq!(m.config_hash, hash);
        assert_eq!(m.rounds_completed, 2);
        let jsonl = std::fs::read_to_string(dir.join("rounds.jsonl")).unwrap();
        for line in jsonl.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["config_hash"], hash.as_str());
            assert_eq!(v["run_id"], format!("mvg_summary-snpla-s{seed}"));
        }
    }
}

#[test]
fn every_csv_parses_strictly() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_tiny(tmp.path(), "a");
    assert_eq!(code(&o), 0);
    let mut files = Vec::new();
    csv_files(&out, &mut files);
    assert!(files.len() >= 5);
    for f in files {
        let bytes = std::fs::read(&f).unwrap();
        assert!(!bytes.contains(&b'\r'), "{}", f.display());
        assert!(bytes.ends_with(b"\n"));
        let mut r = csv::ReaderBuilder::new().flexible(false).from_path(&f).unwrap();
        let header = r.headers().unwrap().clone();
        assert!(header.iter().any(|h| h == "config_hash"), "{}", f.display());
        let hash_col = header.iter().position(|h| h == "config_hash").unwrap();
        for rec in r.records() {
            let rec = rec.unwrap_or_else(|e| panic!("{}: {e}", f.display()));
            assert_eq!(rec[hash_col].len(), 16);
            for field in rec.iter() {
                assert!(!field.contains(','));
            }
        }
    }
}

#[test]
fn sweep_of_default_lambda_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_tiny(tmp.path(), "run");
    assert_eq!(code(&o), 0);
    let cfg = tmp.path().join("tiny.json");
    let sweep = tmp.path().join("sweep");
    let o = snpla(&["sweep", "--config", s(&cfg), "--out", s(&sweep), "--lambdas", "0.7", "--jobs", "1"]);
    assert!(code(&o) == 0 || code(&o) == 2, "{}", stderr(&o));
    assert_eq!(
        without_timings(&out.join("metrics.csv")),
        without_timings(&sweep.join("lambda_0.7").join("metrics.csv"))
    );
    let rows = csv::Reader::from_path(sweep.join("sweep.csv")).unwrap().records().count();
    assert_eq!(rows, 1);
}

#[test]
fn sweep_rejects_empty_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY_SNPLA);
    let o = snpla(&["sweep", "--config", s(&cfg), "--out", s(&tmp.path().join("o")), "--lambdas"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn timing_needs_draws_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY_SNPLA);
    let out = tmp.path().join("t");
    let o = snpla(&["timing", "--config", s(&cfg), "--out", s(&out), "--draws", "0"]);
    assert_eq!(code(&o), 1);
    let o = snpla(&["timing", "--config", s(&cfg), "--out", s(&out), "--draws", "50"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
    let o = snpla(&["timing", "--config", s(&cfg), "--out", s(&out), "--draws", "50", "--train-missing"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(out.join("timing.csv")).unwrap();
    let methods: Vec<String> = r.records().map(|x| x.unwrap()[2].to_string()).collect();
    assert_eq!(methods, ["snpla", "snl"]);
    // checkpoints now exist, so a second call needs no training
    let o = snpla(&["timing", "--config", s(&cfg), "--out", s(&out), "--draws", "50"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn sbc_checks_replicates_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY_SNPLA);
    let out = tmp.path().join("sbc");
    let o = snpla(&["sbc", "--config", s(&cfg), "--out", s(&out), "--replicates", "10"]);
    assert_eq!(code(&o), 1);
    let o = snpla(&["sbc", "--config", s(&cfg), "--out", s(&out), "--replicates", "40", "--draws", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut summary = csv::Reader::from_path(out.join("sbc_summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = summary.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for (j, row) in rows.iter().enumerate() {
        let skipped: usize = row[8].parse().unwrap();
        let mut h = csv::Reader::from_path(out.join(format!("sbc_param{}.csv", j + 1))).unwrap();
        let counts: Vec<usize> = h.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
        assert_eq!(counts.len(), 10);
        assert_eq!(counts.iter().sum::<usize>(), 40 - skipped);
    }
}

#[test]
fn jobs_zero_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY_SNPLA);
    let o = snpla(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("o")), "--jobs", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes() {
    let o = snpla(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).lines().all(|l| l.starts_with("PASS")));
}
