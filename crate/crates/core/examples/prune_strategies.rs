//! Compares the pruning strategies on the same pretrained model
//! (scenario 3: fine-tune on the target, then prune there).

use chanprune::harness::{run_scenario_from, ScenarioConfig, StrategySpec, Workbench};
use chanprune::criteria::Norm;
use chanprune::strategies::{AutoBalancedConfig, PlayPruneConfig};

fn main() -> anyhow::Result<()> {
    let mut base = ScenarioConfig { scenario: 3, ..Default::default() };
    base.model.widths = [8, 16];
    base.epochs.finetune = 4;
    base.schedule.target_compression = 0.5;
    base.schedule.fraction_per_iteration = 0.25;
    base.schedule.retrain_epochs = 1;

    let pretrained = Workbench::pretrained(&base)?;
    let strategies = [
        StrategySpec::OneStep,
        StrategySpec::Iterative,
        StrategySpec::AutoBalanced { alpha: AutoBalancedConfig::default().alpha },
        StrategySpec::PlayAndPrune(PlayPruneConfig { epochs: 3, ..Default::default() }),
        StrategySpec::Psfp { decay: 0.5, epochs: 4, norm: Norm::L2 },
    ];
    println!("{:<16} {:>10} {:>8} {:>8}", "strategy", "FLOPs", "rank-1", "mAP");
    for strategy in strategies {
        let label = format!("{strategy:?}").split([' ', '(', '{']).next().unwrap_or("").to_string();
        let config = ScenarioConfig { strategy, ..base.clone() };
        let report = run_scenario_from(&config, Some(&pretrained)).map_err(|e| e.error)?;
        let last = report.final_stage().expect("scenario has stages");
        println!("{label:<16} {:>10} {:>8.4} {:>8.4}", last.flops, last.rank1, last.map);
    }
    Ok(())
}
