//! Pretrains the toy ResNet on the synthetic source classes, fine-tunes it
//! on the synthetic re-ID target and prints the gallery/query metrics.

use chanprune::harness::{ScenarioConfig, Workbench};
use chanprune::strategies::Trainer;

fn main() -> anyhow::Result<()> {
    let config = ScenarioConfig::default();

    let mut wb = Workbench::new(&config)?;
    let mut graph = wb.pretrain()?;
    println!("source train accuracy {:.3}", wb.source_trainer.train_accuracy(&graph)?);

    let before = wb.target_trainer.evaluate(&graph)?;
    let note = wb.finetune(&mut graph, config.epochs.finetune)?;
    let after = wb.target_trainer.evaluate(&graph)?;
    println!("{note}");
    println!("before fine-tuning: {}", before.summary_line());
    println!("after fine-tuning:  {}", after.summary_line());
    Ok(())
}
