mod common;

use std::time::Instant;

use chanprune::graph::count_flops;
use chanprune::harness::{
    gen_source_dataset, gen_target_reid_dataset, parse_report_json, report_csv, report_json, run_scenario,
    sweep_csv, sweep_pruning_rates, ScenarioConfig, SyntheticDatasetSpec, Workbench,
};
use chanprune::strategies::{Trainer, TargetKind};
use common::small_config;

#[test]
fn default_source_task_is_learnable_in_twenty_epochs() {
    let config = ScenarioConfig::default();
    assert!(config.epochs.pretrain <= 20);
    let mut wb = Workbench::new(&config).unwrap();
    let g = wb.pretrain().unwrap();
    let acc = wb.source_trainer.train_accuracy(&g).unwrap();
    assert!(acc >= 0.95, "source train accuracy {acc}");
}

#[test]
fn coinciding_prototypes_warn() {
    let spec = SyntheticDatasetSpec {
        n_identities: 2,
        noise: 0.0,
        prototype_scale: 0.0,
        ..SyntheticDatasetSpec::source_default()
    };
    let data = gen_source_dataset(&spec).unwrap();
    assert!(!data.warnings.is_empty());
}

#[test]
fn datasets_are_deterministic() {
    let spec = small_config().target;
    let (a, b) = (gen_target_reid_dataset(&spec).unwrap(), gen_target_reid_dataset(&spec).unwrap());
    assert_eq!(a.train.images.data(), b.train.images.data());
    assert_eq!(a.gallery.images.data(), b.gallery.images.data());
    let src = small_config().source;
    assert_eq!(gen_source_dataset(&src).unwrap().train.fingerprint(), gen_source_dataset(&src).unwrap().train.fingerprint());
}

#[test]
fn no_camera_shift_is_nearly_perfect() {
    let mut c = ScenarioConfig::default();
    c.target.camera_strength = 0.0;
    c.schedule.target_compression = 0.0;
    let report = run_scenario(&c).unwrap();
    let rank1 = report.final_stage().unwrap().rank1;
    assert!(rank1 >= 0.95, "rank-1 {rank1}");
}

#[test]
fn baseline_matches_golden_band() {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("golden/baseline.json")).unwrap();
    let mut c = ScenarioConfig { seed: golden["seed"].as_u64().unwrap(), ..Default::default() };
    c.schedule.target_compression = 0.0;
    let rank1 = run_scenario(&c).unwrap().final_stage().unwrap().rank1;
    let (center, band) = (golden["rank1"].as_f64().unwrap(), golden["band"].as_f64().unwrap());
    assert!((rank1 - center).abs() <= band, "rank-1 {rank1} outside {center} +/- {band}");
}

#[test]
fn zero_compression_is_pretrain_plus_finetune() {
    let mut c = small_config();
    c.schedule.target_compression = 0.0;
    let report = run_scenario(&c).unwrap();
    let mut wb = Workbench::new(&c).unwrap();
    let mut g = wb.pretrain().unwrap();
    wb.finetune(&mut g, c.epochs.finetune).unwrap();
    let manual = wb.measure("manual", &g, Instant::now()).unwrap();
    let last = report.final_stage().unwrap();
    assert_eq!((last.flops, last.params), (manual.flops, manual.params));
    assert_eq!((last.rank1, last.map), (manual.rank1, manual.map));
}

#[test]
fn scenarios_one_and_three_reach_the_same_structure() {
    let mut c = small_config();
    c.schedule.target_compression = 0.5;
    c.schedule.fraction_per_iteration = 0.25;
    let s1 = run_scenario(&c).unwrap();
    let s3 = run_scenario(&ScenarioConfig { scenario: 3, ..c.clone() }).unwrap();
    assert_eq!(s1.stages.len(), s3.stages.len());
    assert_eq!(s1.final_stage().unwrap().flops, s3.final_stage().unwrap().flops);
    for r in [&s1, &s3] {
        assert!(r.stages.windows(2).all(|w| w[1].flops <= w[0].flops));
        for (i, s) in r.stages.iter().enumerate().skip(1) {
            if s.stage.starts_with("prune") {
                assert!(s.flops < r.stages[i - 1].flops, "{} did not reduce FLOPs", s.stage);
            }
        }
    }
}

#[test]
fn every_scenario_follows_its_stage_list() {
    let mut c = small_config();
    c.schedule.target_compression = 0.3;
    c.schedule.fraction_per_iteration = 0.3;
    c.s2_source_compression = Some(0.1);
    for scenario in 1..=4 {
        let cfg = ScenarioConfig { scenario, ..c.clone() };
        let report = run_scenario(&cfg).unwrap();
        let names: Vec<&str> = report.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, cfg.stage_names(), "scenario {scenario}");
        let csv = report_csv(&report);
        assert_eq!(csv.lines().count(), report.stages.len() + 1);
        assert_eq!(parse_report_json(&report_json(&report)).unwrap(), report);
    }
}

#[test]
fn flops_targets_are_met() {
    let mut c = small_config();
    c.schedule.target_kind = TargetKind::Flops;
    c.schedule.target_compression = 0.5;
    c.schedule.fraction_per_iteration = 0.25;
    let report = run_scenario(&ScenarioConfig { scenario: 3, ..c }).unwrap();
    let (first, last) = (&report.stages[0], report.final_stage().unwrap());
    assert!((last.flops as f64) <= 0.5 * first.flops as f64 * 1.05, "{} of {}", last.flops, first.flops);
}

#[test]
fn sweep_rate_zero_is_the_baseline() {
    let c = ScenarioConfig { scenario: 3, ..small_config() };
    let rows = sweep_pruning_rates(&c, &[0.0, 0.3]).unwrap();
    assert_eq!(sweep_csv(&rows).lines().count(), 3);
    let mut base = c.clone();
    base.schedule.target_compression = 0.0;
    let last = run_scenario(&base).unwrap();
    let last = last.final_stage().unwrap();
    assert_eq!((rows[0].flops, rows[0].rank1, rows[0].map), (last.flops, last.rank1, last.map));
    assert!(rows[1].flops < rows[0].flops);
    assert!(sweep_pruning_rates(&c, &[]).is_err());
    assert!(sweep_pruning_rates(&c, &[1.0]).is_err());
}

#[test]
fn scenario_errors_keep_the_partial_report() {
    let mut c = small_config();
    c.scenario = 3;
    c.schedule.target_compression = 0.3;
    // A criterion that needs more reconstruction locations than exist fails in the prune stage.
    c.criterion = chanprune::strategies::Criterion::Thinet { locations: 0, seed: 0 };
    let err = run_scenario(&c).unwrap_err();
    let names: Vec<&str> = err.partial.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["pretrain", "finetune_target"]);
}

#[test]
fn measured_flops_use_the_target_input() {
    let wb = Workbench::new(&small_config()).unwrap();
    let g = wb.initial_model().unwrap();
    let shape = wb.target_trainer.input_shape();
    assert_eq!(shape, [1, 3, 16, 8]);
    assert!(count_flops(&g, &shape).unwrap() > 0);
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
