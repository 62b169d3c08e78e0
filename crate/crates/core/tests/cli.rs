//! The command-line front end: outputs, exit codes and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "data": {"d": 24, "n": 8},
  "model": {"k": 6, "m": 3, "l": 2, "positive_experts": 3},
  "train": {"steps": 80, "post_prune_steps": 10},
  "eval": {"eval_samples": 200, "proficiency_samples": 50}
}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-prune")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let outs: Vec<_> = ["a", "b"].iter().map(|s| dir.path().join(s)).collect();
    for out in &outs {
        let o = cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7", "--rho", "0.5"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train_log.csv", "scores.csv", "metrics.csv", "finetune_log.csv", "layer_trained.moel", "patterns.moep"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let train = std::fs::read_to_string(outs[0].join("train_log.csv")).unwrap();
    assert!(train.starts_with("step,hinge_loss,train_error,norm_1,"));
    let scores = std::fs::read_to_string(outs[0].join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 7);
    let retained: usize = scores.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(retained, 2);
}

#[test]
fn sweep_marks_infeasible_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("s");
    let o = cli(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--rho", "0,0.5,1.5", "--criterion", "random"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = std::fs::read_to_string(out.join("accuracy_vs_rho.csv")).unwrap();
    assert_eq!(acc.lines().count(), 4);
    assert!(acc.lines().last().unwrap().contains("infeasible"));
    assert!(out.join("flops_vs_rho.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["bogus"]).status.code(), Some(1));
    assert_eq!(cli(&["run", "--config", &cfg, "--out", out, "--criterion", "nope"]).status.code(), Some(1));
    assert_eq!(cli(&["run", "--config", &cfg, "--out", out, "--rho", "0.1,0.2"]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"k": 1}}"#).unwrap();
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap(), "--out", out]).status.code(), Some(1));
    assert_eq!(cli(&["run", "--config", "/nonexistent/cfg.json", "--out", out]).status.code(), Some(3));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["gradcheck", "--instances", "20", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("gradcheck.csv").exists());
}
