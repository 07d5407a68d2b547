//! Experiment harness: synthetic data, the training loop, the four
//! prune/fine-tune scenarios, reports, plots and the command line.

mod cli;
mod data;
mod report;
mod scenario;
mod trainer;

pub use data::{
    gen_source_dataset, gen_target_reid_dataset, ClassificationDataset, ImageSet, ReidDataset, SyntheticDatasetSpec,
};
pub use trainer::{TaskTrainer, TrainConfig};
pub use scenario::{
    run_scenario, run_scenario_from, s2_target_compression, sweep_csv, sweep_pruning_rates, EpochConfig, Pretrained, RunReport,
    ScenarioConfig, ScenarioError, StageRecord, StrategySpec, SweepRow, Workbench, CONFIG_VERSION,
};
pub use report::{
    axis_range, emit_plot, emit_report, parse_report_json, render_plot, render_report, report_csv, report_json,
    PlotSpec, ReportFormat, Series, REPORT_COLUMNS,
};
pub use cli::cli;
