//! The four prune/fine-tune orderings and the pruning-rate sweep.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_source_dataset, gen_target_reid_dataset, ClassificationDataset, ReidDataset, SyntheticDatasetSpec};
use super::trainer::{TaskTrainer, TrainConfig};
use crate::criteria::Norm;
use crate::error::{Error, Result};
use crate::graph::{build_toy_resnet, count_flops, count_params, parse_arch, NetworkGraph, ToyNetSpec};
use crate::reid::{domain_similarity, finetune_policy, FinetunePolicy, LossKind, PolicyThresholds};
use crate::strategies::{
    prune_autobalanced, prune_iterative, prune_one_step, prune_play_and_prune, psfp_train, AutoBalancedConfig,
    Criterion, PlayPruneConfig, PruneSchedule, PsfpState, StrategyReport, TargetKind, TrainHooks, Trainer,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    OneStep,
    Iterative,
    AutoBalanced {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    PlayAndPrune(PlayPruneConfig),
    /// Soft pruning to `schedule.target_compression` over `epochs` epochs.
    Psfp {
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_psfp_epochs")]
        epochs: usize,
        #[serde(default = "default_psfp_norm")]
        norm: Norm,
    },
}

fn default_alpha() -> f64 {
    AutoBalancedConfig::default().alpha
}
fn default_decay() -> f64 {
    1.0
}
fn default_psfp_epochs() -> usize {
    10
}
fn default_psfp_norm() -> Norm {
    Norm::L2
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec::Iterative
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochConfig {
    pub pretrain: usize,
    pub finetune: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            pretrain: 15,
            finetune: 15,
        }
    }
}

fn source_train_default() -> TrainConfig {
    TrainConfig {
        loss: LossKind::CrossEntropy,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub scenario: u8,
    pub seed: u64,
    pub source: SyntheticDatasetSpec,
    pub target: SyntheticDatasetSpec,
    pub model: ToyNetSpec,
    /// Architecture file to use instead of the toy net.
    pub arch_file: Option<PathBuf>,
    pub criterion: Criterion,
    pub strategy: StrategySpec,
    /// Target compression of every prune stage (of the overall run for scenario 2).
    pub schedule: PruneSchedule,
    /// Scenario 2 only: compression of the source-side prune stage. The
    /// target-side stage then removes what is left to reach the overall target.
    pub s2_source_compression: Option<f64>,
    pub source_train: TrainConfig,
    pub target_train: TrainConfig,
    pub epochs: EpochConfig,
    pub policy: PolicyThresholds,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            version: CONFIG_VERSION,
            scenario: 1,
            seed: 0,
            source: SyntheticDatasetSpec::source_default(),
            target: SyntheticDatasetSpec::default(),
            model: ToyNetSpec::default(),
            arch_file: None,
            criterion: Criterion::L1,
            strategy: StrategySpec::Iterative,
            schedule: PruneSchedule::default(),
            s2_source_compression: None,
            source_train: source_train_default(),
            target_train: TrainConfig::default(),
            epochs: EpochConfig::default(),
            policy: PolicyThresholds::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::VersionMismatch {
                expected: CONFIG_VERSION,
                found: self.version,
            });
        }
        if !(1..=4).contains(&self.scenario) {
            return Err(Error::Config(format!("scenario {} not in 1..=4", self.scenario)));
        }
        if self.scenario == 4 && matches!(self.strategy, StrategySpec::Psfp { .. }) {
            return Err(Error::Config("soft pruning is not applicable to scenario 4".into()));
        }
        self.schedule.validate()?;
        self.source_train.validate()?;
        self.target_train.validate()?;
        if self.scenario == 2 {
            let s = self
                .s2_source_compression
                .ok_or_else(|| Error::Config("scenario 2 needs s2_source_compression".into()))?;
            if !(0.0..=self.schedule.target_compression).contains(&s) {
                return Err(Error::Config(format!(
                    "s2_source_compression {s} not in [0, target {}]",
                    self.schedule.target_compression
                )));
            }
        }
        if let StrategySpec::PlayAndPrune(p) = &self.strategy {
            p.validate()?;
        }
        Ok(())
    }

    /// Stage names in execution order.
    pub fn stage_names(&self) -> Vec<&'static str> {
        match self.scenario {
            1 => vec!["pretrain", "prune_retrain_source", "finetune_target", "eval"],
            2 => vec![
                "pretrain",
                "prune_retrain_source",
                "finetune_target",
                "eval",
                "prune_retrain_target",
                "eval",
            ],
            3 => vec!["pretrain", "finetune_target", "prune_retrain_target", "eval"],
            _ => vec!["pretrain", "prune_target", "retrain_finetune_target", "eval"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub flops: u64,
    pub params: u64,
    pub rank1: f64,
    pub map: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: u8,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// Per-iteration logs of each prune stage, keyed `<index>_<stage>`.
    pub strategy_logs: BTreeMap<String, StrategyReport>,
    pub notes: Vec<String>,
    pub config: Option<ScenarioConfig>,
}

impl RunReport {
    /// Copy with every wall-time field zeroed.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.stages.iter_mut().for_each(|s| s.seconds = 0.0);
        r
    }

    pub fn final_stage(&self) -> Option<&StageRecord> {
        self.stages.last()
    }
}

/// A scenario that stopped early, with everything recorded before the failure.
#[derive(Debug)]
pub struct ScenarioError {
    pub error: Error,
    pub partial: RunReport,
}

impl std::fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "scenario aborted after {} stages: {}", self.partial.stages.len(), self.error)
    }
}

impl std::error::Error for ScenarioError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Datasets and trainers a scenario works with.
pub struct Workbench {
    pub config: ScenarioConfig,
    pub source: ClassificationDataset,
    pub target: ReidDataset,
    pub source_trainer: TaskTrainer,
    pub target_trainer: TaskTrainer,
}

impl Workbench {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let source = gen_source_dataset(&config.source)?;
        let target = gen_target_reid_dataset(&config.target)?;
        Ok(Workbench {
            source_trainer: TaskTrainer::classification(&source, config.source_train.clone(), config.seed ^ 0x51)?,
            target_trainer: TaskTrainer::reid(&target, config.target_train.clone(), config.seed ^ 0x7a)?,
            config: config.clone(),
            source,
            target,
        })
    }

    pub fn initial_model(&self) -> Result<NetworkGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        match &self.config.arch_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_arch(&text)?.build(&mut rng)
            }
            None => build_toy_resnet(&self.config.model, &mut rng),
        }
    }

    /// Pretrains and keeps the source trainer (classifier head, optimizer
    /// state, batch stream) so later runs continue exactly where a fresh
    /// run would.
    pub fn pretrained(config: &ScenarioConfig) -> Result<Pretrained> {
        let mut wb = Workbench::new(config)?;
        let graph = wb.pretrain()?;
        Ok(Pretrained {
            graph,
            source_trainer: wb.source_trainer,
        })
    }

    /// Trains a fresh model on the source classification task.
    pub fn pretrain(&mut self) -> Result<NetworkGraph> {
        let mut g = self.initial_model()?;
        for _ in 0..self.config.epochs.pretrain {
            self.source_trainer.train_epoch(&mut g, &mut TrainHooks::default())?;
        }
        Ok(g)
    }

    /// Stage record on the target test split.
    pub fn measure(&self, stage: &str, graph: &NetworkGraph, started: Instant) -> Result<StageRecord> {
        let eval = self.target_trainer.evaluate_test(graph)?;
        Ok(StageRecord {
            stage: stage.to_string(),
            flops: count_flops(graph, &self.target_trainer.input_shape())?,
            params: count_params(graph),
            rank1: eval.rank1(),
            map: eval.map,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn policy(&self, graph: &NetworkGraph) -> Result<(FinetunePolicy, String)> {
        const SAMPLE: usize = 256;
        let mut s = self.source_trainer.train_embeddings(graph)?;
        let mut t = self.target_trainer.train_embeddings(graph)?;
        s.truncate(SAMPLE);
        t.truncate(SAMPLE);
        let spc = self.target_trainer.samples_per_class();
        match domain_similarity(&s, &t) {
            Ok(d) => {
                let p = finetune_policy(d.cosine_distance, d.mmd, spc, &self.config.policy);
                Ok((
                    p,
                    format!(
                        "finetune policy {p:?}: cosine distance {:.4}, MMD {:.4}, {spc:.1} samples per identity",
                        d.cosine_distance, d.mmd
                    ),
                ))
            }
            Err(e) => Ok((FinetunePolicy::TrainAll, format!("finetune policy TrainAll (domain statistics unavailable: {e})"))),
        }
    }

    /// Fine-tunes on the target task, freezing the feature extractor when the policy says so.
    pub fn finetune(&mut self, graph: &mut NetworkGraph, epochs: usize) -> Result<String> {
        let (policy, note) = self.policy(graph)?;
        let head: std::collections::BTreeSet<_> = [graph.output()].into_iter().collect();
        let mut hooks = TrainHooks {
            regularizer: None,
            trainable: (policy == FinetunePolicy::FreezeExtractor).then_some(&head),
        };
        for _ in 0..epochs {
            self.target_trainer.train_epoch(graph, &mut hooks)?;
        }
        Ok(note)
    }

    /// Runs the configured strategy with the given compression and retrain epochs.
    pub fn prune(
        &mut self,
        graph: &NetworkGraph,
        on_source: bool,
        compression: f64,
        retrain_epochs: usize,
    ) -> Result<(NetworkGraph, StrategyReport)> {
        if compression <= 0.0 {
            return Ok((graph.clone(), StrategyReport::default()));
        }
        let mut schedule = self.config.schedule.clone();
        schedule.target_compression = compression;
        schedule.retrain_epochs = retrain_epochs;
        let criterion = self.config.criterion.clone();
        let trainer: &mut dyn Trainer = if on_source {
            &mut self.source_trainer
        } else {
            &mut self.target_trainer
        };
        match &self.config.strategy {
            StrategySpec::OneStep => prune_one_step(graph, &criterion, &schedule, trainer),
            StrategySpec::Iterative => prune_iterative(graph, &criterion, &schedule, trainer),
            StrategySpec::AutoBalanced { alpha } => {
                let (g, r, _) = prune_autobalanced(graph, &AutoBalancedConfig { alpha: *alpha }, &schedule, trainer)?;
                Ok((g, r))
            }
            StrategySpec::PlayAndPrune(cfg) => {
                let (g, r, _) = prune_play_and_prune(graph, cfg, trainer)?;
                Ok((g, r))
            }
            StrategySpec::Psfp { decay, epochs, norm } => {
                if schedule.target_kind == TargetKind::Flops {
                    return Err(Error::Config("soft pruning takes a channel-rate target".into()));
                }
                let mut state = PsfpState::new(compression, *decay, *epochs, *norm)?;
                psfp_train(graph, &mut state, trainer)
            }
        }
    }
}

/// A pretrained model together with the source trainer that produced it.
/// Reusable by every config that shares the seed, model, source data,
/// source training settings and pretrain epochs.
#[derive(Clone)]
pub struct Pretrained {
    pub graph: NetworkGraph,
    source_trainer: TaskTrainer,
}

/// Overall compression `t` split into a source stage `s` and the target
/// stage that completes it: `(1 - s)(1 - x) = 1 - t`.
pub fn s2_target_compression(total: f64, source: f64) -> f64 {
    if source >= 1.0 {
        return 0.0;
    }
    (1.0 - (1.0 - total) / (1.0 - source)).max(0.0)
}

pub fn run_scenario(config: &ScenarioConfig) -> std::result::Result<RunReport, ScenarioError> {
    run_scenario_from(config, None)
}

/// Like [`run_scenario`], reusing an already pretrained model when given.
pub fn run_scenario_from(
    config: &ScenarioConfig,
    pretrained: Option<&Pretrained>,
) -> std::result::Result<RunReport, ScenarioError> {
    let mut report = RunReport {
        scenario: config.scenario,
        seed: config.seed,
        config: Some(config.clone()),
        ..Default::default()
    };
    match run_stages(config, pretrained, &mut report) {
        Ok(()) => Ok(report),
        Err(error) => Err(ScenarioError { error, partial: report }),
    }
}

fn run_stages(config: &ScenarioConfig, pretrained: Option<&Pretrained>, report: &mut RunReport) -> Result<()> {
    let mut wb = Workbench::new(config)?;
    let target = config.schedule.target_compression;
    let retrain = config.schedule.retrain_epochs;
    let finetune = config.epochs.finetune;
    let mut clock = Instant::now();
    let mut graph = match pretrained {
        Some(p) => {
            wb.source_trainer = p.source_trainer.clone();
            p.graph.clone()
        }
        None => wb.pretrain()?,
    };
    let mut last = String::new();
    for (i, stage) in config.stage_names().into_iter().enumerate() {
        if i > 0 {
            match stage {
                "prune_retrain_source" => {
                    let c = if config.scenario == 2 {
                        config.s2_source_compression.unwrap_or(0.0)
                    } else {
                        target
                    };
                    let (g, log) = wb.prune(&graph, true, c, retrain)?;
                    graph = g;
                    report.strategy_logs.insert(format!("{i}_{stage}"), log);
                }
                "prune_retrain_target" => {
                    let c = if config.scenario == 2 {
                        s2_target_compression(target, config.s2_source_compression.unwrap_or(0.0))
                    } else {
                        target
                    };
                    let (g, log) = wb.prune(&graph, false, c, retrain)?;
                    graph = g;
                    report.strategy_logs.insert(format!("{i}_{stage}"), log);
                }
                "prune_target" => {
                    let (g, log) = wb.prune(&graph, false, target, 0)?;
                    graph = g;
                    report.strategy_logs.insert(format!("{i}_{stage}"), log);
                }
                "finetune_target" | "retrain_finetune_target" => {
                    let note = wb.finetune(&mut graph, finetune)?;
                    report.notes.push(format!("{stage}: {note}"));
                }
                "eval" => {}
                other => unreachable!("unknown stage {other}"),
            }
        }
        let rec = if stage == "eval" {
            let r = report.stages.last().expect("eval follows a stage");
            debug_assert_eq!(r.stage, last);
            StageRecord {
                stage: stage.to_string(),
                seconds: clock.elapsed().as_secs_f64(),
                ..r.clone()
            }
        } else {
            wb.measure(stage, &graph, clock)?
        };
        log::info!(
            "stage {i} {stage}: flops {} params {} rank1 {:.4} mAP {:.4}",
            rec.flops,
            rec.params,
            rec.rank1,
            rec.map
        );
        last = rec.stage.clone();
        report.stages.push(rec);
        clock = Instant::now();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub flops: u64,
    pub params: u64,
    pub rank1: f64,
    pub map: f64,
}

/// One scenario run per rate with a shared seed and a shared pretrained
/// model; rows keep the order of `rates`.
pub fn sweep_pruning_rates(config: &ScenarioConfig, rates: &[f64]) -> Result<Vec<SweepRow>> {
    if rates.is_empty() {
        return Err(Error::Config("sweep needs at least one rate".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!("rate {r} not in [0, 1)")));
    }
    config.validate()?;
    let pretrained = Workbench::pretrained(config)?;
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut c = config.clone();
        c.schedule.target_compression = rate;
        if let Some(s) = c.s2_source_compression.as_mut() {
            *s = s.min(rate);
        }
        let report = run_scenario_from(&c, Some(&pretrained)).map_err(|e| e.error)?;
        let last = report.final_stage().expect("scenarios have stages");
        rows.push(SweepRow {
            rate,
            flops: last.flops,
            params: last.params,
            rank1: last.rank1,
            map: last.map,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("rate,flops,params,rank1,mAP\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.rate, r.flops, r.params, r.rank1, r.map));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn scenario_four_rejects_soft_pruning() {
        let c = ScenarioConfig {
            scenario: 4,
            strategy: StrategySpec::Psfp {
                decay: 1.0,
                epochs: 5,
                norm: Norm::L2,
            },
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let ok = ScenarioConfig { scenario: 3, ..c };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn scenario_two_needs_a_split() {
        let mut c = ScenarioConfig {
            scenario: 2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.s2_source_compression = Some(0.3);
        assert!(c.validate().is_ok());
        let x = s2_target_compression(0.5, 0.3);
        assert!(((1.0 - 0.3) * (1.0 - x) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stage_algebra() {
        let names = |s| ScenarioConfig { scenario: s, s2_source_compression: Some(0.2), ..Default::default() }.stage_names();
        assert_eq!(names(1).len(), 4);
        assert_eq!(&names(2)[..4], &names(1)[..]);
        assert_eq!(names(3)[1], "finetune_target");
        assert_eq!(names(4)[1], "prune_target");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::from_toml("scenario = 1\nbogus = 2").is_err());
        let c = ScenarioConfig::from_toml("scenario = 3\n[criterion]\nname = \"fpgm\"\n[strategy]\nkind = \"one_step\"").unwrap();
        assert_eq!(c.criterion, Criterion::Fpgm);
        assert_eq!(c.strategy, StrategySpec::OneStep);
    }
}
