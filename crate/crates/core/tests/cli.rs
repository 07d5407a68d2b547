mod common;

use std::path::Path;
use std::process::{Command, Output};

use chanprune::harness::parse_report_json;
use common::small_config;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanprune")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn last_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("a JSON line");
    serde_json::from_str(line).expect("valid JSON")
}

fn write_config(dir: &Path) -> String {
    let mut c = small_config();
    c.schedule.target_compression = 0.25;
    c.schedule.fraction_per_iteration = 0.25;
    let path = dir.join("small.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn count_reports_resnet50_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["count", "--arch", "resnet50", "--input", "3x256x128"], dir.path());
    assert!(out.status.success());
    let v = last_json(&out);
    let (flops, params) = (v["flops"].as_f64().unwrap(), v["params"].as_f64().unwrap());
    assert!((flops - 6.32e9).abs() / 6.32e9 <= 0.2, "{flops}");
    assert!((params - 23.48e6).abs() / 23.48e6 <= 0.02, "{params}");
}

#[test]
fn scenario_reports_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = run(&["scenario", "--config", &cfg, "--seed", "7", "--out", name], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
        let text = std::fs::read_to_string(dir.path().join(name).join("report.json")).unwrap();
        let report = parse_report_json(&text).unwrap();
        assert_eq!(report.seed, 7);
        assert!(dir.path().join(name).join("report.csv").exists());
        reports.push(report.without_timing());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["scenario", "--config", "does/not/exist.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v = last_json(&out);
    assert!(v["message"].as_str().unwrap().contains("does/not/exist.toml"), "{v}");
    assert_eq!(v["path"], "does/not/exist.toml");
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(last_json(&out)["error"], "usage");
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["count", "--threads", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_json(&out)["error"], "config");
}

#[test]
fn train_prune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(&["train", "--config", &cfg, "--out", "m"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let out = run(
        &["prune", "--config", &cfg, "--out", "p", "--model", "m/model.cpm", "--criterion", "fpgm", "--strategy", "one_step", "--rate", "0.5"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = last_json(&out);
    assert!(v["flops_after"].as_u64().unwrap() < v["flops_before"].as_u64().unwrap());
    let log = std::fs::read_to_string(dir.path().join("p/prune_log.csv")).unwrap();
    assert!(log.starts_with("iteration,"));
    let out = run(&["eval", "--config", &cfg, "--out", "e", "--model", "p/pruned.cpm", "--max-rank", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let cmc = std::fs::read_to_string(dir.path().join("e/cmc.csv")).unwrap();
    assert_eq!(cmc.lines().count(), 6);
    let out = run(&["prune", "--config", &cfg, "--model", "m/model.cpm", "--criterion", "nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(&["sweep", "--config", &cfg, "--scenario", "3", "--rates", "0.2,0.4", "--out", "s"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let svg = std::fs::read_to_string(dir.path().join("s/sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}
