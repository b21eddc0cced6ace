use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn proctrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proctrack"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PROCTRACK_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    assert_eq!(v["error"]["exit"].as_i64(), out.status.code().map(i64::from));
    assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    v
}

const TOY: &str = r#"{"vocab_size":128,"d":16,"layers":1,"heads":2,"ff":16,"m_max":64,"max_span_len":3}"#;

#[test]
fn procedural_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&proctrack(&["synth", "--paragraphs", "6", "--seed", "1", "--out", "train.jsonl"], d));
    ok(&proctrack(&["synth", "--paragraphs", "3", "--seed", "2", "--format", "tsv", "--out", "test.tsv"], d));

    let stats: Value = serde_json::from_str(&ok(&proctrack(&["ingest", "--check", "train.jsonl"], d))).unwrap();
    assert_eq!(stats["kind"], "procedural");
    assert_eq!(stats["annotated"], 6);
    assert_eq!(stats["data_hash"].as_str().unwrap().len(), 64);

    let config = format!(
        r#"{{"task":"procedural","name":"run","data":{{"train":"train.jsonl","test":"test.tsv"}},"encoder":{TOY},"train":{{"epochs":3}}}}"#
    );
    std::fs::write(d.join("run.json"), config).unwrap();
    let summary: Value = serde_json::from_str(&ok(&proctrack(&["train", "--config", "run.json"], d))).unwrap();
    let run = d.join("runs/run");
    for f in ["config.json", "manifest.json", "history.json", "checkpoint.json", "predictions.jsonl", "report.json", "report.txt", "report.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoint_hash"], summary["checkpoint_hash"]);
    assert_eq!(manifest["history"].as_array().unwrap().len(), 3);

    // stored predictions re-evaluate to the stored report
    ok(&proctrack(
        &["eval", "--gold", "test.tsv", "--pred", "runs/run/predictions.jsonl", "--report", "again.json", "--csv", "again.csv"],
        d,
    ));
    assert_eq!(std::fs::read(d.join("again.json")).unwrap(), std::fs::read(run.join("report.json")).unwrap());
    assert_eq!(std::fs::read(d.join("again.csv")).unwrap(), std::fs::read(run.join("report.csv")).unwrap());

    ok(&proctrack(&["predict", "--model", "runs/run/checkpoint.json", "--data", "test.tsv", "--out", "pred.jsonl"], d));
    assert_eq!(std::fs::read(d.join("pred.jsonl")).unwrap(), std::fs::read(run.join("predictions.jsonl")).unwrap());

    // pred == gold scores one everywhere
    ok(&proctrack(&["synth", "--paragraphs", "4", "--seed", "3", "--out", "gold.jsonl"], d));
    let table = ok(&proctrack(&["eval", "--gold", "gold.jsonl", "--pred", "gold.jsonl", "--report", "self.json"], d));
    assert!(!table.is_empty());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("self.json")).unwrap()).unwrap();
    assert_eq!(report["task"], "procedural");
    let sentence = &report["report"]["sentence"];
    for k in ["cat1", "cat2", "cat3", "macro_avg", "micro_avg"] {
        assert_eq!(sentence[k], 1.0, "{k}");
    }
    assert_eq!(report["report"]["document"]["overall"]["f1"], 1.0);

    // pseudo-labeling
    ok(&proctrack(&["synth", "--paragraphs", "0", "--pool", "3", "--seed", "4", "--out", "pool.jsonl"], d));
    let labeled: Value = serde_json::from_str(&ok(&proctrack(
        &["augment", "--model", "runs/run/checkpoint.json", "--pool", "pool.jsonl", "--out", "pseudo.jsonl"],
        d,
    )))
    .unwrap();
    assert_eq!(labeled["labeled"], 3);
    let stats: Value = serde_json::from_str(&ok(&proctrack(&["ingest", "--check", "pseudo.jsonl"], d))).unwrap();
    assert_eq!(stats["annotated"], 3);
}

#[test]
fn story_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&proctrack(&["synth", "--task", "story", "--paragraphs", "4", "--seed", "1", "--out", "stories.jsonl"], d));
    let stats: Value = serde_json::from_str(&ok(&proctrack(&["ingest", "--check", "stories.jsonl"], d))).unwrap();
    assert_eq!(stats["kind"], "story");
    let config = format!(
        r#"{{"task":"story","name":"s","output_dir":"out","data":{{"train":"stories.jsonl","dev":"stories.jsonl"}},"encoder":{TOY},"story":{{"epochs":2}}}}"#
    );
    std::fs::write(d.join("story.json"), config).unwrap();
    ok(&proctrack(&["train", "--config", "story.json"], d));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/s/report.json")).unwrap()).unwrap();
    let r = &report["report"];
    assert!(r["verifiability"].as_f64() <= r["consistency"].as_f64());
    assert!(r["consistency"].as_f64() <= r["accuracy"].as_f64());
    ok(&proctrack(&["predict", "--model", "out/s/checkpoint.json", "--data", "stories.jsonl", "--out", "p.jsonl"], d));
    assert_eq!(std::fs::read(d.join("p.jsonl")).unwrap(), std::fs::read(d.join("out/s/predictions.jsonl")).unwrap());
}

#[test]
fn gradcheck_crf_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = proctrack(&["gradcheck", "--module", "crf"], dir.path());
    let v: Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn failures_carry_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = proctrack(&["ingest", "--check", "missing.jsonl"], d);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_of(&out)["error"]["code"], "io");

    // Destroy then Create is rejected
    let bad = r#"{"para_id":"p","sentences":["a .","b .","c ."],"entities":[{"name":"x","states":[{"tag":"unknown"},{"tag":"none"},{"tag":"unknown"},{"tag":"unknown"}]}],"annotated":true}"#;
    std::fs::write(d.join("bad.jsonl"), bad).unwrap();
    let out = proctrack(&["ingest", "--check", "bad.jsonl"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"]["code"], "validation");

    std::fs::write(d.join("cfg.json"), r#"{"task":"procedural","name":"r","data":{"train":"t.jsonl"},"learning_rate":1}"#).unwrap();
    let out = proctrack(&["train", "--config", "cfg.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_of(&out)["error"]["message"].as_str().unwrap().contains("learning_rate"));

    std::fs::write(d.join("notckpt.json"), r#"{"task":"other"}"#).unwrap();
    let out = proctrack(&["predict", "--model", "notckpt.json", "--data", "bad.jsonl", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));
}
