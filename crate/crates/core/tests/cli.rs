mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::fixtures;
use serde_json::{json, Value};

fn stare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stare")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = stare(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, v.to_string()).unwrap();
    path.to_path_buf()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

/// simulate → tokenize → train into `root`, returning the train dir.
fn pipeline(root: &Path, task: &str, model: &str) -> PathBuf {
    let sim_cfg = write_json(&root.join("sim.json"), &json!({"n_agents": 6, "n_subpops": 2, "n_days": 3}));
    let train_cfg = write_json(
        &root.join("train.json"),
        &json!({"encoder": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32},
                "recurrent": {"embedding_dim": 8, "hidden_dim": 8}}),
    );
    let (sim, tok, tr) = (root.join("sim"), root.join("tok"), root.join("train"));
    ok(&["simulate", "--config", s(&sim_cfg), "--seed", "3", "--out", s(&sim)]);
    let kind = if task == "subpop" { "subpop" } else { "agent" };
    ok(&[
        "tokenize",
        "--input",
        s(&sim.join("trajectories.csv")),
        "--labels",
        s(&sim.join("labels.json")),
        "--label-kind",
        kind,
        "--out",
        s(&tok),
    ]);
    ok(&[
        "train",
        "--config",
        s(&train_cfg),
        "--data",
        s(&tok),
        "--task",
        task,
        "--model",
        model,
        "--epochs",
        "2",
        "--seed",
        "5",
        "--out",
        s(&tr),
    ]);
    tr
}

#[test]
fn pipeline_is_reproducible_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = pipeline(a.path(), "agent", "stare");
    let tb = pipeline(b.path(), "agent", "stare");
    for (dir, name) in [
        ("sim", "trajectories.csv"),
        ("sim", "labels.json"),
        ("tok", "tokens.jsonl"),
        ("tok", "vocab.json"),
        ("train", "checkpoint.json"),
        ("train", "metrics.csv"),
        ("train", "split.json"),
    ] {
        assert_eq!(read(&a.path().join(dir), name), read(&b.path().join(dir), name), "{dir}/{name}");
    }
    let ma: Value = serde_json::from_slice(&read(&ta, "manifest.json")).unwrap();
    let mb: Value = serde_json::from_slice(&read(&tb, "manifest.json")).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seed"], 5);
    let digests = |m: &Value| m["inputs"].as_array().unwrap().iter().map(|i| i["sha256"].clone()).collect::<Vec<_>>();
    assert_eq!(digests(&ma), digests(&mb));

    // eval and analyze run on the trained model
    let ev = ok(&[
        "eval",
        "--checkpoint",
        s(&ta.join("checkpoint.json")),
        "--data",
        s(&a.path().join("tok")),
        "--out",
        s(&a.path().join("eval")),
    ]);
    let line = String::from_utf8_lossy(&ev.stdout);
    assert!(line.contains("report.csv"), "{line}");
    let report = String::from_utf8(read(&a.path().join("eval"), "report.csv")).unwrap();
    assert!(report.starts_with("model,task,"), "{report}");
    ok(&[
        "analyze",
        "--checkpoint",
        s(&ta.join("checkpoint.json")),
        "--data",
        s(&a.path().join("tok")),
        "--sim-labels",
        s(&a.path().join("sim/labels.json")),
        "--analyses",
        "matrix,blocks,heatmap",
        "--out",
        s(&a.path().join("an")),
    ]);
    let an = a.path().join("an");
    assert!(an.join("heatmap.png").exists());
    let blocks: Value = serde_json::from_slice(&read(&an, "blocks.json")).unwrap();
    assert!(blocks.is_object());
}

#[test]
fn recurrent_baseline_checkpoint_evaluates() {
    let d = tempfile::tempdir().unwrap();
    let tr = pipeline(d.path(), "subpop", "bilstm");
    ok(&[
        "eval",
        "--checkpoint",
        s(&tr.join("checkpoint.json")),
        "--data",
        s(&d.path().join("tok")),
        "--out",
        s(&d.path().join("ev")),
    ]);
    let report = String::from_utf8(read(&d.path().join("ev"), "report.csv")).unwrap();
    assert!(report.contains("bilstm"), "{report}");
}

#[test]
fn tokenize_reproduces_the_worked_example() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("points.csv");
    std::fs::write(&csv, fixtures::to_csv(&fixtures::worked_example())).unwrap();
    let cfg = write_json(&d.path().join("tok.json"), &serde_json::to_value(fixtures::worked_example_config()).unwrap());
    let out = d.path().join("tok");
    ok(&["tokenize", "--config", s(&cfg), "--input", s(&csv), "--out", s(&out)]);
    let text = String::from_utf8(read(&out, "tokens.jsonl")).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let tokens: Vec<u32> = serde_json::from_value(first["tokens"].clone()).unwrap();
    assert_eq!(tokens, fixtures::worked_example_expected());
}

fn error_kind(o: &Output) -> String {
    let v: Value =
        serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&o.stderr)));
    v["error"].as_str().unwrap_or_default().to_string()
}

#[test]
fn failures_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");

    let o = stare(&["tokenize", "--input", s(&d.path().join("missing.csv")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!error_kind(&o).is_empty());

    let bad = write_json(&d.path().join("bad.json"), &json!({"n_days": "three"}));
    let o = stare(&["simulate", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(d.path().join("broken.json"), "{not json").unwrap();
    let o = stare(&["simulate", "--config", s(&d.path().join("broken.json")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));

    let csv = d.path().join("points.csv");
    std::fs::write(&csv, fixtures::to_csv(&fixtures::worked_example())).unwrap();
    let o = stare(&["tokenize", "--input", s(&csv), "--label-kind", "subpop", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));

    let tok = d.path().join("tok");
    ok(&["tokenize", "--input", s(&csv), "--out", s(&tok)]);
    let o = stare(&["train", "--data", s(&tok), "--task", "subpop", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    let o = stare(&["train", "--data", s(&tok), "--task", "mlm", "--model", "lstm", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
}
