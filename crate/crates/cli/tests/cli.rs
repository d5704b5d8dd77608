use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundflow"))
        .args(args)
        .env("GROUNDFLOW_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const RED: &str = r#"{"next_subtask_description":"click the red button","action_type":"click","target_object":"red button","bbox":[100,200,300,400]}"#;
const BLUE: &str = r#"{"next_subtask_description":"click the blue button","action_type":"click","target_object":"blue button","bbox":[100,300,300,400]}"#;

#[test]
fn planner_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    let pred = dir.path().join("pred.jsonl");
    fs::write(&gt, format!("{RED}\n{RED}\n")).unwrap();
    fs::write(&pred, format!("{RED}\n{BLUE}\n")).unwrap();
    let out = run(
        dir.path(),
        &[
            "eval-planner",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["exact_match"], 0.5);
    assert_eq!(v["miou"], 0.75);
    assert_eq!(v["invalid"], 0);

    fs::write(&pred, format!("{RED}\nnot a plan\n")).unwrap();
    let out = run(
        dir.path(),
        &[
            "eval-planner",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--min-miou",
            "0.9",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["invalid"], 1);
    assert_eq!(v["miou"], 0.5);
}

#[test]
fn bad_inputs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    fs::write(&gt, "{\"bbox\":[1,2,3,4]}\n").unwrap();
    let out = run(
        dir.path(),
        &[
            "eval-planner",
            "--pred",
            gt.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"tasks\": 3}").unwrap();
    let out = run(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(
        dir.path(),
        &[
            "gen-data",
            "--tasks",
            "juggle",
            "--episodes-per-task",
            "1",
            "--out",
            "d",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = run(dir.path(), &["eval-success", "--policy", "psychic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval-success", "--checkpoint", "nope.bin"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_writes_under_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "gen-data",
            "--tasks",
            "click_single,click_among_k:2",
            "--episodes-per-task",
            "2",
            "--seed",
            "3",
            "--out",
            "data",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["episodes"], 4);
    assert!(dir.path().join("data/summary.json").is_file());
    assert!(dir
        .path()
        .join("data/click_among_k-2_00001/meta.json")
        .is_file());
}

#[test]
fn scripted_success_and_acceptance_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(
        &cfg,
        r#"{"tasks": ["click_among_k:2", "stack_k:2"], "eval_trials": 5}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = run(
        dir.path(),
        &[
            "eval-success",
            "--config",
            c,
            "--policy",
            "scripted",
            "--min-success",
            "1.0",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("task,successes,trials"));
    assert!(csv.contains("click_among_k:2,5,5,1"));

    let out = run(
        dir.path(),
        &[
            "eval-success",
            "--config",
            c,
            "--policy",
            "random",
            "--trials",
            "2",
            "--min-success",
            "0.9",
        ],
    );
    assert_eq!(out.status.code(), Some(4));

    let out = run(
        dir.path(),
        &[
            "eval-robustness",
            "--config",
            c,
            "--policy",
            "scripted",
            "--rates",
            "0,1",
            "--trials",
            "4",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.contains("lang@1.00,0,4"));
}
