//! Command-line front end. `main` only forwards `std::env::args` here.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::report::{emit_plot, emit_report, write_file, PlotSpec, ReportFormat, Series};
use super::scenario::{run_scenario, sweep_csv, sweep_pruning_rates, ScenarioConfig, StrategySpec, Workbench};
use crate::error::{Error, Result};
use crate::graph::{build_resnet_shape, count_flops, count_params, deserialize, parse_arch, serialize, NetworkGraph};
use crate::strategies::{Criterion, Trainer};

#[derive(Parser, Debug)]
#[command(name = "chanprune", version, about = "Structured channel pruning for re-identification networks")]
struct Cli {
    /// Scenario configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for models and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "chanprune-out")]
    out: PathBuf,
    /// Worker threads. The engine is single-threaded; values above 1 are accepted and ignored.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// FLOPs and parameters of an architecture.
    Count(CountArgs),
    /// Pretrain on the source task and fine-tune on the target task.
    Train(TrainArgs),
    /// Prune a saved model on the target task.
    Prune(PruneArgs),
    /// CMC and mAP of a saved model on the target test split.
    Eval(EvalArgs),
    /// Run the configured scenario and write its report.
    Scenario(ScenarioArgs),
    /// Run the scenario once per pruning rate.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct CountArgs {
    /// `resnet18`, `resnet34`, `resnet50`, `toy` or an architecture file.
    #[arg(long, default_value = "toy")]
    arch: String,
    /// Input shape as CxHxW.
    #[arg(long, default_value = "3x16x8")]
    input: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Skip target fine-tuning.
    #[arg(long)]
    source_only: bool,
}

#[derive(Args, Debug)]
struct PruneArgs {
    /// Model file written by `train` or an earlier `prune`
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Criterion name, overriding the configuration.
    #[arg(long)]
    criterion: Option<String>,
    /// Strategy kind, overriding the configuration.
    #[arg(long)]
    strategy: Option<String>,
    /// Target compression, overriding the configuration.
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model file to evaluate
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Highest CMC rank written.
    #[arg(long, default_value_t = 20)]
    max_rank: usize,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Overrides the scenario number of the configuration.
    #[arg(long)]
    scenario: Option<u8>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Overrides the scenario number of the configuration.
    #[arg(long)]
    scenario: Option<u8>,
    /// Comma-separated pruning rates.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.25, 0.5, 0.75])]
    rates: Vec<f64>,
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        eprintln!("[{}] {}", record.level(), record.args());
    }
    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

/// Runs the command line and returns the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    println!("{}", json!({"error": "usage", "message": e.kind().to_string()}));
                    2
                }
            };
        }
    };
    if cli.verbose && log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let mut line = json!({"error": e.kind(), "message": e.to_string()});
            if let Error::Io { path, .. } = &e {
                line["path"] = json!(path.display().to_string());
            }
            println!("{line}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut c = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Count(a) => count(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Prune(a) => prune(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Scenario(a) => scenario(cli, a),
        Command::Sweep(a) => sweep(cli, a),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad input shape {s:?}, expected CxHxW")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Config(format!("bad input shape {s:?}, expected CxHxW"))),
    }
}

fn count(cli: &Cli, a: &CountArgs) -> Result<()> {
    let [c, h, w] = parse_shape(&a.input)?;
    let graph = match a.arch.as_str() {
        "resnet18" => build_resnet_shape(18)?,
        "resnet34" => build_resnet_shape(34)?,
        "resnet50" => build_resnet_shape(50)?,
        "toy" => Workbench::new(&load_config(cli)?)?.initial_model()?,
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            parse_arch(&text)?.build(&mut rng)?
        }
    };
    let flops = count_flops(&graph, &[1, c, h, w])?;
    let params = count_params(&graph);
    println!(
        "{}",
        json!({"arch": a.arch, "input": [c, h, w], "flops": flops, "params": params,
               "gflops": flops as f64 / 1e9, "mparams": params as f64 / 1e6})
    );
    Ok(())
}

fn save_model(path: &Path, graph: &NetworkGraph) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serialize(graph)).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<NetworkGraph> {
    deserialize(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let config = load_config(cli)?;
    let mut wb = Workbench::new(&config)?;
    let mut g = wb.pretrain()?;
    let acc = wb.source_trainer.train_accuracy(&g)?;
    log::info!("source train accuracy {acc:.4}");
    if !a.source_only {
        let note = wb.finetune(&mut g, config.epochs.finetune)?;
        log::info!("{note}");
    }
    let path = cli.out.join("model.cpm");
    save_model(&path, &g)?;
    let e = wb.target_trainer.evaluate_test(&g)?;
    println!(
        "{}",
        json!({"model": path.display().to_string(), "source_train_accuracy": acc,
               "rank1": e.rank1(), "map": e.map})
    );
    Ok(())
}

fn prune(cli: &Cli, a: &PruneArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if let Some(name) = &a.criterion {
        config.criterion = toml::from_str::<Criterion>(&format!("name = {name:?}"))
            .map_err(|e| Error::Config(format!("criterion {name:?}: {e}")))?;
    }
    if let Some(kind) = &a.strategy {
        config.strategy = toml::from_str::<StrategySpec>(&format!("kind = {kind:?}"))
            .map_err(|e| Error::Config(format!("strategy {kind:?}: {e}")))?;
    }
    if let Some(r) = a.rate {
        config.schedule.target_compression = r;
    }
    config.validate()?;
    let graph = load_model(&a.model)?;
    let mut wb = Workbench::new(&config)?;
    let (pruned, log) = wb.prune(
        &graph,
        false,
        config.schedule.target_compression,
        config.schedule.retrain_epochs,
    )?;
    let path = cli.out.join("pruned.cpm");
    save_model(&path, &pruned)?;
    write_file(&cli.out.join("prune_log.csv"), &log.to_csv())?;
    let shape = wb.target_trainer.input_shape();
    let e = wb.target_trainer.evaluate_test(&pruned)?;
    println!(
        "{}",
        json!({"model": path.display().to_string(),
               "flops_before": count_flops(&graph, &shape)?, "flops_after": count_flops(&pruned, &shape)?,
               "params_after": count_params(&pruned), "rank1": e.rank1(), "map": e.map})
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let config = load_config(cli)?;
    let graph = load_model(&a.model)?;
    let wb = Workbench::new(&config)?;
    let e = wb.target_trainer.evaluate_test(&graph)?;
    let mut cmc = e.clone();
    cmc.cmc.truncate(a.max_rank.max(1));
    write_file(&cli.out.join("cmc.csv"), &cmc.cmc_csv())?;
    println!(
        "{}",
        json!({"rank1": e.rank(1), "rank5": e.rank(5), "rank10": e.rank(10), "map": e.map, "skipped": e.skipped})
    );
    Ok(())
}

fn scenario(cli: &Cli, a: &ScenarioArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if let Some(s) = a.scenario {
        config.scenario = s;
    }
    config.validate()?;
    let report = match run_scenario(&config) {
        Ok(r) => r,
        Err(e) => {
            emit_report(&e.partial, ReportFormat::Json, &cli.out.join("report.partial.json"))?;
            return Err(e.error);
        }
    };
    emit_report(&report, ReportFormat::Json, &cli.out.join("report.json"))?;
    emit_report(&report, ReportFormat::Csv, &cli.out.join("report.csv"))?;
    let last = report.final_stage().expect("scenarios have stages");
    println!(
        "{}",
        json!({"scenario": report.scenario, "seed": report.seed, "flops": last.flops,
               "params": last.params, "rank1": last.rank1, "map": last.map,
               "report": cli.out.join("report.json").display().to_string()})
    );
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if let Some(s) = a.scenario {
        config.scenario = s;
    }
    let rows = sweep_pruning_rates(&config, &a.rates)?;
    write_file(&cli.out.join("sweep.csv"), &sweep_csv(&rows))?;
    let series = |label: &str, f: fn(&super::scenario::SweepRow) -> f64| Series {
        label: label.into(),
        points: rows.iter().map(|r| (r.rate, f(r))).collect(),
    };
    emit_plot(
        &PlotSpec {
            title: format!("Scenario {} accuracy vs pruning rate", config.scenario),
            x_label: "pruning rate".into(),
            y_label: "accuracy".into(),
            series: vec![series("mAP", |r| r.map), series("rank-1", |r| r.rank1)],
        },
        &cli.out.join("sweep.svg"),
    )?;
    println!("{}", json!({"rows": rows.len(), "csv": cli.out.join("sweep.csv").display().to_string()}));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("3x256x128").unwrap(), [3, 256, 128]);
        assert!(parse_shape("3x0x1").is_err());
        assert!(parse_shape("3x4").is_err());
    }

    #[test]
    fn unknown_subcommand_exits_two() {
        assert_eq!(cli(["chanprune", "frobnicate"]), 2);
    }

    #[test]
    fn count_resnet50() {
        assert_eq!(cli(["chanprune", "count", "--arch", "resnet50", "--input", "3x256x128"]), 0);
    }
}
