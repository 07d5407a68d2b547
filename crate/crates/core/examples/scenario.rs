//! Runs one scenario from a TOML config (or a small built-in one) and
//! prints the stage table.
//!
//! `cargo run --release --example scenario -- [config.toml]`

use chanprune::harness::{run_scenario, ScenarioConfig};

const SMALL: &str = r#"
version = 1
scenario = 1
seed = 5

[model]
widths = [8, 16]

[epochs]
pretrain = 15
finetune = 4

[schedule]
target_compression = 0.5
fraction_per_iteration = 0.25
retrain_epochs = 1

[criterion]
name = "fpgm"
"#;

fn main() -> anyhow::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => ScenarioConfig::load(path.as_ref())?,
        None => ScenarioConfig::from_toml(SMALL)?,
    };
    let report = run_scenario(&config).map_err(|e| e.error)?;
    println!("{:<24} {:>10} {:>8} {:>8} {:>8}", "stage", "FLOPs", "rank-1", "mAP", "secs");
    for s in &report.stages {
        println!("{:<24} {:>10} {:>8.4} {:>8.4} {:>8.1}", s.stage, s.flops, s.rank1, s.map, s.seconds);
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(())
}
