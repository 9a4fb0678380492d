use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accguard::checkpoint::{ModelCheckpoint, Provenance};
use accguard::model::{Activation, DenseLayer, LayerSpec, Model, QuantizerKind, Weights};
use accguard::qcore::{DType, QuantSpec};
use serde_json::Value;

fn accguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accguard")).args(args).output().expect("spawn accguard")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn config_text(kind: &str, p_star: &str, lambda: &str) -> String {
    format!(
        r#"{{
  "format_version": 1,
  "seed": 5,
  "data": {{"kind": "blobs", "classes": 3, "features": 6, "per_class": 40,
            "spread": "3", "noise": "0.7", "seed": 2, "test_fraction": "0.25"}},
  "architecture": {{"hidden": [32, 32], "kind": "{kind}", "weight_bits": 8, "act_bits": 8, "p_star": {p_star}}},
  "pretrain": {{"epochs": 6, "batch_size": 16, "learning_rate": "0.01", "lr_factor": "0.5",
                "lr_period": 10, "optimizer": "adam"}},
  "train": {{"epochs": 3, "batch_size": 16, "learning_rate": "0.002", "lr_factor": "0.5",
             "lr_period": 10, "lambda": "{lambda}", "optimizer": "adam"}}
}}
"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the small wnq config into `dir` and returns the checkpoint path.
fn train(dir: &Path, p_star: u32) -> PathBuf {
    let cfg = write(dir, "config.json", &config_text("wnq", &p_star.to_string(), "0.01"));
    let o = accguard(&["train", "--config", s(&cfg), "--out", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    dir.join("checkpoint.json")
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn bounds_columns_for_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 18);
    let o = accguard(&["bounds", "--checkpoint", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows[0], ["layer", "channel", "K", "N", "M", "datatype_bits", "weight_bits", "l1_budget"]);
    // interior layer: K=32, unsigned 8-bit inputs, 8-bit weights
    let interior: Vec<_> = rows[1..].iter().filter(|r| r[0] == "1").collect();
    assert_eq!(interior.len(), 32);
    for r in interior {
        assert_eq!((r[2].as_str(), r[3].as_str(), r[4].as_str(), r[5].as_str()), ("32", "8", "8", "22"));
        assert!(r[6].parse::<u32>().unwrap() <= 18);
    }
    let j = accguard(&["bounds", "--checkpoint", s(&ck), "--format", "json", "--P", "16"]);
    let v: Value = serde_json::from_str(&stdout(&j)).unwrap();
    assert_eq!(v["rows"][0]["layer"], 0);
    assert_eq!(v["seed"], 5);
}

#[test]
fn bounds_of_an_all_zero_layer() {
    let dt = DType::signed(4).unwrap();
    let model = Model {
        input: Some(QuantSpec::symmetric(0.0, dt)),
        layers: vec![DenseLayer {
            spec: LayerSpec {
                in_features: 3,
                out_features: 2,
                weight_bits: 4,
                act_bits: 4,
                act_signed: true,
                kind: QuantizerKind::Baseline,
                p_star: None,
            },
            weights: Weights::Baseline { w: vec![0.0; 6], d: vec![0.0; 2] },
            bias: vec![0.0; 2],
            activation: Activation { relu: false, quant: Some(QuantSpec::symmetric(0.0, dt)) },
        }],
    };
    let ck = ModelCheckpoint::new(model, Provenance { config_hash: "0".repeat(64), seed: 0 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.json");
    ck.save(&path).unwrap();
    let o = accguard(&["bounds", "--checkpoint", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| r[6] == "1"));
}

#[test]
fn usage_and_io_errors_exit_2() {
    let o = accguard(&["bounds", "--checkpoint", "/nonexistent/ck.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/ck.json"), "{}", stderr(&o));
    assert_eq!(accguard(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(accguard(&["attack"]).status.code(), Some(2));
    assert_eq!(accguard(&["train", "--config", "x.json", "--format", "xml"]).status.code(), Some(2));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "neg.json", &config_text("wnq", "16", "-0.5"));
    let o = accguard(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lambda"), "{}", stderr(&o));

    let text = config_text("wnq", "16", "0.01").replace("\"seed\": 5,", "\"seed\": 5, \"sede\": 1,");
    let cfg = write(dir.path(), "typo.json", &text);
    let o = accguard(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));

    let cfg = write(dir.path(), "nop.json", &config_text("wnq", "null", "0.01"));
    assert_eq!(accguard(&["train", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn train_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(a.path(), 16);
    train(b.path(), 16);
    for f in ["checkpoint.json", "metrics.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert!(!metrics.contains(",-0,"));
    assert_eq!(csv_rows(&metrics)[0], ["epoch", "task_loss", "penalty", "metric", "sparsity"]);
}

#[test]
fn attack_certifies_at_p_star_and_breaks_below() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 16);
    let o = accguard(&["attack", "--checkpoint", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total_overflows"], 0);
    assert_eq!(v["accumulator_bits"], serde_json::json!([16, 16, 16]));

    let out = dir.path().join("attack.csv");
    let o = accguard(&["attack", "--checkpoint", s(&ck), "--P", "10", "--format", "csv", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&std::fs::read_to_string(&out).unwrap());
    let overflows: u64 = rows[1..].iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    assert!(overflows > 0);
    assert_eq!(accguard(&["attack", "--checkpoint", s(&ck), "--P", "1"]).status.code(), Some(2));
}

#[test]
fn eval_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 18);
    let cfg = dir.path().join("config.json");
    let o = accguard(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total_overflows"], 0);
    assert_eq!(v["samples"], 30);
    let metric: f64 = v["metric"].as_str().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&metric));

    let empty = write(dir.path(), "empty.csv", "label,a,b,c,d,e,f\n");
    let o = accguard(&["eval", "--checkpoint", s(&ck), "--data", s(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no rows"), "{}", stderr(&o));
    let narrow = write(dir.path(), "narrow.csv", "0,1.0,2.0\n");
    assert_eq!(accguard(&["eval", "--checkpoint", s(&ck), "--data", s(&narrow)]).status.code(), Some(1));

    let o = accguard(&["report", "--checkpoint", s(&ck)]);
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows[0], ["layer", "sparsity", "entropy_bits", "compression_rate"]);
    assert_eq!(rows.last().unwrap()[0], "model");

    let o = accguard(&["export", "--checkpoint", s(&ck)]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 3);
    assert_eq!(v["layers"][1]["weights_int"].as_array().unwrap().len(), 32);
    assert_eq!(v["layers"][1]["accumulator"]["bits"], 18);
}

#[test]
fn sweep_outputs_and_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let base: Value = serde_json::from_str(&config_text("wnq", "16", "0.01")).unwrap();
    let plan = serde_json::json!({
        "base": base, "weight_bits": [6, 8], "act_bits": [8], "p_offsets": [0, -6], "seeds": [1, 2],
    });
    let path = write(dir.path(), "plan.json", &plan.to_string());
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_accguard"))
            .args(["sweep", "--config", s(&path)])
            .env("ACCGUARD_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let one = run("1");
    assert_eq!(one, run("3"));
    assert_eq!(one, run("not-a-number"));
    let rows = csv_rows(&one);
    assert_eq!(rows.len(), 1 + 8);
    let col = |name: &str| rows[0].iter().position(|h| h == name).unwrap();
    assert!(rows[1..].iter().all(|r| r[col("status")] == "ok"));
    assert!(rows[1..].iter().all(|r| r[col("certified")] == "true"));

    let j = accguard(&["sweep", "--config", s(&path), "--format", "json"]);
    let v: Value = serde_json::from_str(&stdout(&j)).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 8);

    let mut empty = plan.clone();
    empty["seeds"] = serde_json::json!([]);
    let path = write(dir.path(), "empty.json", &empty.to_string());
    let o = accguard(&["sweep", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));
}
