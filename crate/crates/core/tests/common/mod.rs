#![allow(dead_code)]

use std::sync::OnceLock;

use chanprune::graph::NetworkGraph;
use chanprune::harness::{ScenarioConfig, Workbench};

/// Small, fast scenario: 8/16-wide toy net, few identities, short schedules.
pub fn small_config() -> ScenarioConfig {
    let mut c = ScenarioConfig { seed: 11, ..Default::default() };
    c.model.widths = [8, 16];
    c.source.n_identities = 16;
    c.target.n_identities = 40;
    c.epochs.pretrain = 4;
    c.epochs.finetune = 2;
    c.schedule.retrain_epochs = 1;
    c
}

/// Workbench for `small_config` plus a model pretrained on its source task
/// and fine-tuned for a few epochs on the target task.
pub fn trained() -> (Workbench, NetworkGraph) {
    static MODEL: OnceLock<NetworkGraph> = OnceLock::new();
    let config = small_config();
    let model = MODEL
        .get_or_init(|| {
            let mut wb = Workbench::new(&config).expect("workbench");
            let mut g = wb.pretrain().expect("pretrain");
            wb.finetune(&mut g, 3).expect("finetune");
            g
        })
        .clone();
    (Workbench::new(&config).expect("workbench"), model)
}
