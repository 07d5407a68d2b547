//! Sweeps the pruning rate, then writes the CSV and an SVG of rank-1 and
//! mAP against the rate.

use chanprune::harness::{emit_plot, sweep_csv, sweep_pruning_rates, PlotSpec, ScenarioConfig, Series};

fn main() -> anyhow::Result<()> {
    let mut config = ScenarioConfig { scenario: 3, ..Default::default() };
    config.model.widths = [8, 16];
    config.epochs.finetune = 4;
    config.schedule.fraction_per_iteration = 0.25;
    config.schedule.retrain_epochs = 1;

    let rows = sweep_pruning_rates(&config, &[0.0, 0.25, 0.5, 0.75])?;
    let dir = std::env::temp_dir().join("chanprune-sweep");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    print!("{}", sweep_csv(&rows));

    let spec = PlotSpec {
        title: "pruning rate sweep".into(),
        x_label: "pruning rate".into(),
        y_label: "score".into(),
        series: vec![
            Series { label: "rank-1".into(), points: rows.iter().map(|r| (r.rate, r.rank1)).collect() },
            Series { label: "mAP".into(), points: rows.iter().map(|r| (r.rate, r.map)).collect() },
        ],
    };
    emit_plot(&spec, &dir.join("sweep.svg"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
