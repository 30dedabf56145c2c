use std::collections::BTreeSet;

use serde_json::Value;
use snpla_cli::config::{block_keys, top_level_keys, Experiment, ExperimentConfig, Method};
use snpla_cli::HarnessError;

fn schema() -> Value {
    let text = include_str!("../../../docs/schema.json");
    serde_json::from_str(text).expect("schema is JSON")
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().expect("object").keys().cloned().collect()
}

fn config_err(text: &str) -> (String, String) {
    match ExperimentConfig::parse(text) {
        Err(HarnessError::Config { path, message }) => (path, message),
        Err(e) => panic!("expected a config error, got {e}"),
        Ok(_) => panic!("expected a config error"),
    }
}

#[test]
fn schema_lists_every_field() {
    let s = schema();
    let top: BTreeSet<String> = top_level_keys().into_iter().collect();
    assert_eq!(keys(&s["properties"]), top);
    for (block, fields) in block_keys() {
        let want: BTreeSet<String> = fields.into_iter().collect();
        assert_eq!(keys(&s["$defs"][&block]["properties"]), want, "block {block}");
    }
}

#[test]
fn schema_enums_match_names() {
    let s = schema();
    let exps: Vec<&str> = s["properties"]["experiment"]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
    assert_eq!(exps, names);
    let methods: Vec<&str> = s["properties"]["method"]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    assert_eq!(methods, names);
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 10);
}

#[test]
fn defaults_follow_the_experiment() {
    let tm = ExperimentConfig::with_defaults(Experiment::TwoMoons, Method::Snpla).snpla_or_default();
    assert_eq!((tm.rounds, tm.n_sims, tm.n_post), (10, 1000, 60_000));
    assert_eq!((tm.lr_post, tm.gamma_post, tm.lambda), (0.001, 0.9, 0.7));
    let mvg = ExperimentConfig::with_defaults(Experiment::MvgSummary, Method::Snpla).snpla_or_default();
    assert_eq!((mvg.rounds, mvg.n_sims, mvg.n_post), (10, 2500, 10_000));
    assert_eq!((mvg.lr_post, mvg.gamma_post), (0.002, 0.95));
    let lv = ExperimentConfig::with_defaults(Experiment::LotkaVolterra, Method::Snpla).snpla_or_default();
    assert_eq!((lv.rounds, lv.n_sims, lv.n_post, lv.lambda), (5, 1000, 10_000, 0.9));
    let learned = ExperimentConfig::with_defaults(Experiment::MvgLearned, Method::Snpla).snpla_or_default();
    assert!(learned.use_summary_net);
    let snl = ExperimentConfig::with_defaults(Experiment::LotkaVolterra, Method::Snl).snl_or_default();
    assert_eq!((snl.lr_like, snl.lr_decay), (0.0005, 0.98));
}

#[test]
fn partial_block_keeps_other_defaults() {
    let cfg = ExperimentConfig::parse(r#"{"experiment":"two_moons","method":"snpla","snpla":{"rounds":3}}"#).unwrap();
    let b = cfg.snpla_or_default();
    assert_eq!(b.rounds, 3);
    assert_eq!(b.n_post, 60_000);
    assert_eq!(b.flow.hidden, vec![50, 50]);
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let (path, msg) = config_err(r#"{"experiment":"three_moons","method":"snpla","snpla":{}}"#);
    assert_eq!(path, "experiment");
    for e in Experiment::ALL {
        assert!(msg.contains(e.name()), "{msg}");
    }
}

#[test]
fn unknown_field_reports_its_path() {
    let (path, _) = config_err(r#"{"experiment":"two_moons","method":"snpla","snpla":{"flow":{"depth":3}}}"#);
    assert_eq!(path, "snpla.flow.depth");
    let (path, _) = config_err(r#"{"experiment":"two_moons","method":"snpla","snpla":{},"colour":1}"#);
    assert_eq!(path, "colour");
}

#[test]
fn wrong_type_reports_its_path() {
    let (path, _) = config_err(r#"{"experiment":"two_moons","method":"snpla","snpla":{"rounds":"ten"}}"#);
    assert_eq!(path, "snpla.rounds");
}

#[test]
fn method_block_is_required() {
    let (path, _) = config_err(r#"{"experiment":"two_moons","method":"snl","snpla":{}}"#);
    assert_eq!(path, "snl");
}

#[test]
fn invalid_values_are_rejected() {
    config_err(r#"{"experiment":"two_moons","method":"snpla","n_seeds":0,"snpla":{}}"#);
    config_err(r#"{"experiment":"two_moons","method":"snpla","snpla":{"lambda":-1}}"#);
    config_err(r#"{"experiment":"two_moons","method":"snpla","snpla":{"use_summary_net":true}}"#);
    config_err(r#"{"experiment":"mvg_five","method":"snpla","output_dir":"","snpla":{}}"#);
}

#[test]
fn snapshot_round_trips() {
    for e in Experiment::ALL {
        for m in Method::ALL {
            let cfg = ExperimentConfig::with_defaults(e, m);
            let back = ExperimentConfig::parse(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.content_hash(), cfg.content_hash());
        }
    }
}

#[test]
fn hash_tracks_content_but_not_location() {
    let a = ExperimentConfig::with_defaults(Experiment::MvgSummary, Method::Snpla);
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.content_hash(), b.content_hash());
    b.data_seed = 1;
    assert_ne!(a.content_hash(), b.content_hash());
    assert_eq!(a.content_hash().len(), 16);
    assert!(a.content_hash().chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn seeds_and_run_ids() {
    let mut cfg = ExperimentConfig::with_defaults(Experiment::TwoMoons, Method::Snl);
    cfg.seed = 7;
    cfg.n_seeds = 3;
    assert_eq!(cfg.seeds(), vec![7, 8, 9]);
    assert_eq!(cfg.run_id(8), "two_moons-snl-s8");
}
