use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqlab::dataset::{encode, read_jsonl, SftRecord};
use seqlab::rollout::RolloutOptions;
use seqlab::solvers::BeliefSolverConfig;
use seqlab::{rollout, PolicyHandle, TaskFile};

const BIN: &str = env!("CARGO_BIN_EXE_seqlab");

fn seqlab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = seqlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_solve_export_replays() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = run.to_str().unwrap();
    let cfg = write_config(dir.path(), r#"{"num_tasks": 3, "env": {"horizon": 6}, "dataset": {"trajectories_per_task": 4}}"#);
    for cmd in ["gen", "solve", "export"] {
        ok(&[cmd, "--config", &cfg, "--out", out, "--seed", "9"]);
    }
    assert_eq!(fs::read_dir(run.join("solutions")).unwrap().count(), 4);
    let records: Vec<SftRecord> = read_jsonl(&run.join("corpus/sft.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    for rec in &records {
        let file = TaskFile::read(&run.join("tasks").join(format!("{}.json", rec.task_id))).unwrap();
        let policy = PolicyHandle::oracle_for(&file.task, &BeliefSolverConfig::default()).unwrap();
        for (text, &seed) in rec.trajectories.iter().zip(&rec.seeds) {
            let replay = rollout(&file.task, &rec.task_id, &policy, seed, None, &RolloutOptions::default()).unwrap();
            assert_eq!(text, &encode(&replay.trajectory).text);
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for cmd in ["gen", "solve", "export"] {
        assert_eq!(manifest["runs"][cmd]["seed"], 9);
    }
}

#[test]
fn oracle_eval_has_zero_gap_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    ok(&["gen", "--out", out, "--seed", "4"]);
    ok(&["eval", "--out", out, "--seed", "4", "--policy", "oracle"]);
    let read = || fs::read(dir.path().join("run/reports/eval.json")).unwrap();
    let first = read();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["mean_gap"], 0.0);
    ok(&["eval", "--out", out, "--seed", "4", "--policy", "oracle"]);
    assert_eq!(first, read());

    ok(&["eval", "--out", out, "--seed", "4", "--policy", "random"]);
    let report: serde_json::Value = serde_json::from_slice(&read()).unwrap();
    assert!(report["mean_gap"].as_f64().unwrap() > 0.2);
}

#[test]
fn theory_sim_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"theory": {"dim": 3, "ms": [10, 100], "ns": [100.0], "kappas": [1.0, 5.0], "tasks": 50}}"#,
    );
    let out = dir.path().join("run");
    ok(&["theory-sim", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("reports/theory_sim.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",false")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    assert_eq!(seqlab(&["eval", "--policy", "bogus", "--out", out]).status.code(), Some(1));
    assert_eq!(seqlab(&["gen", "--no-such-flag"]).status.code(), Some(1));
    let bad = write_config(dir.path(), r#"{"p_low": 0.9, "p_high": 0.2}"#);
    assert_eq!(seqlab(&["gen", "--config", &bad, "--out", out]).status.code(), Some(1));
    let unknown = write_config(dir.path(), r#"{"colour": 1}"#);
    assert_eq!(seqlab(&["gen", "--config", &unknown, "--out", out]).status.code(), Some(1));

    // No tasks generated yet.
    assert_eq!(seqlab(&["solve", "--out", out]).status.code(), Some(2));

    // A policy served with a fine belief grid beats an oracle solved on a
    // very coarse one, which the eval flags as a pairing failure.
    let cfg = write_config(
        dir.path(),
        r#"{"setting": "pomdp", "num_tasks": 10, "env": {"horizon": 5, "obs_prob": 0.5},
            "solver": {"quantization": 0.9}, "eval": {"rollouts_per_task": 200}}"#,
    );
    ok(&["gen", "--config", &cfg, "--out", out]);
    let external = format!("external:cmd:{BIN} serve --out {out}");
    let res = seqlab(&["eval", "--config", &cfg, "--out", out, "--policy", &external]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert!(manifest["runs"]["eval"]["check_failed"].as_str().unwrap().contains("pairing"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "policy": "random", "num_tasks": 2}"#);
    let printed: serde_json::Value = serde_json::from_str(&ok(&["config", "--config", &cfg, "--seed", "5"])).unwrap();
    assert_eq!(printed["seed"], 5);
    assert_eq!(printed["policy"], "random");
    assert_eq!(printed["num_tasks"], 2);
}

#[test]
fn darkroom_oracle_reaches_every_goal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["darkroom", "--out", out.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("reports/darkroom.json")).unwrap()).unwrap();
    assert_eq!(report["per_goal"].as_array().unwrap().len(), 20);
    assert_eq!(report["mean_reward"], report["oracle_mean"]);
}
