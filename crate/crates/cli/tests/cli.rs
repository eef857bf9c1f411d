use std::process::{Command, Output};

use lorafa_core::harness::{RunConfig, RunReport, RunStatus, TaskKind};
use lorafa_core::{AdaptationMode, ModelConfig};

fn lorafa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorafa")).args(args).output().expect("binary runs")
}

const TINY: &[&str] = &["--d", "8", "--layers", "1", "--heads", "2", "--vocab", "10", "--seq-len", "6", "--batch", "2"];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn train_writes_round_trippable_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let p = path.to_str().unwrap();
    let mut args = with_tiny(&["train", "--mode", "lora-fa", "--rank", "2", "--steps", "4", "--eval-examples", "8"]);
    args.extend_from_slice(&["--report", p]);
    let out = lorafa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report.status, RunStatus::Completed);
    assert_eq!(report.loss_curve.len(), 4);
    assert_eq!(report.config.rank, 2);
    assert_eq!(report.config.mode, AdaptationMode::LoraFa);
    let again = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(again, report);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(AdaptationMode::Lora, TaskKind::Reverse);
    cfg.model = ModelConfig::new(8, 1, 2, 10, 6, 2);
    cfg.steps = 2;
    cfg.rank = 4;
    cfg.eval_examples = 4;
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let rep_path = dir.path().join("r.json");
    let out = lorafa(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--rank",
        "3",
        "--lr",
        "0.02",
        "--report",
        rep_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::from_json(&std::fs::read_to_string(&rep_path).unwrap()).unwrap();
    assert_eq!(report.config.rank, 3);
    assert_eq!(report.config.optimizer.lr(), 0.02);
    assert_eq!(report.config.mode, AdaptationMode::Lora);
    assert_eq!(report.config.task, TaskKind::Reverse);
    assert_eq!(report.config.steps, 2);
}

#[test]
fn config_errors_exit_2() {
    let bad_rank = lorafa(&with_tiny(&["train", "--mode", "lora-fa", "--rank", "64", "--steps", "1"]));
    assert_eq!(bad_rank.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"bogus": 1}"#).unwrap();
    let bad_file = lorafa(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(bad_file.status.code(), Some(2));
    let missing = lorafa(&["train", "--config", "/nonexistent/c.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let neg_lr = lorafa(&with_tiny(&["train", "--lr", "-1", "--steps", "1"]));
    assert_eq!(neg_lr.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let out = lorafa(&with_tiny(&[
        "train", "--mode", "ft", "--optimizer", "sgd", "--lr", "1e300", "--steps", "5", "--eval-examples", "4",
    ]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("g.json");
    let csv = dir.path().join("g.csv");
    let mut args = with_tiny(&["sweep", "--ranks", "1,2", "--lrs", "0.01,0.001", "--steps", "2", "--eval-examples", "4"]);
    args.extend_from_slice(&["--out-json", json.to_str().unwrap(), "--out-csv", csv.to_str().unwrap()]);
    let out = lorafa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("rank,lr,final_loss,status\n"));
    assert_eq!(text.lines().count(), 5);
    let grid: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn memreport_probe_prints_reconciled_json() {
    let out = lorafa(&[
        "memreport", "--d", "16", "--layers", "2", "--heads", "2", "--vocab", "10", "--seq-len", "6", "--batch", "2",
        "--rank", "4", "--probe",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for e in entries {
        let r = &e["reconcile"];
        assert_eq!(r["analytic_linear_elements"], r["measured_linear_elements"]);
    }
}

#[test]
fn memreport_rejects_bad_modifiers() {
    let out = lorafa(&["memreport", "--shards", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = lorafa(&["gradcheck", "--shapes", "3", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["passed"], true);
    }
}

#[test]
fn quick_equiv_passes() {
    let out = lorafa(&["equiv", "--layers", "6", "--train-steps", "3", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 5);
}
