use serde::{Deserialize, Serialize};

use super::{record, total_conv_channels, train_epochs, unit_scores, Criterion, StrategyReport, TrainHooks, Trainer};
use crate::criteria::{rank_ascending, ProbeBatch};
use crate::error::{Error, Result};
use crate::graph::{count_flops, hard_prune, prune_units, ChannelGroup, NetworkGraph, NodeId, PruneUnit};
use crate::tensor::{Trace, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every unit loses the same fraction of its channels.
    #[default]
    PerLayer,
    /// Channels compete across units on raw scores.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Channels,
    /// The target is a FLOPs reduction, converted to a uniform channel rate.
    Flops,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    #[serde(default = "default_fraction")]
    pub fraction_per_iteration: f64,
    /// Number of probe batches drawn for ranking.
    #[serde(default = "default_ranking")]
    pub ranking_epochs: usize,
    #[serde(default = "default_retrain")]
    pub retrain_epochs: usize,
    #[serde(default = "default_target")]
    pub target_compression: f64,
    #[serde(default)]
    pub target_kind: TargetKind,
    #[serde(default)]
    pub scope: Scope,
}

fn default_fraction() -> f64 {
    0.05
}
fn default_ranking() -> usize {
    1
}
fn default_retrain() -> usize {
    4
}
fn default_target() -> f64 {
    0.5
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            fraction_per_iteration: default_fraction(),
            ranking_epochs: default_ranking(),
            retrain_epochs: default_retrain(),
            target_compression: default_target(),
            target_kind: TargetKind::Channels,
            scope: Scope::PerLayer,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let f = self.fraction_per_iteration;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("fraction_per_iteration {f} not in (0, 1]")));
        }
        let t = self.target_compression;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Config(format!("target_compression {t} not in [0, 1)")));
        }
        if self.ranking_epochs == 0 {
            return Err(Error::Config("ranking_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// `ceil(target / fraction)`, robust to representation error (0.5/0.05).
pub fn iteration_count(fraction: f64, target: f64) -> usize {
    if target <= 0.0 {
        return 0;
    }
    (target / fraction - 1e-9).ceil().max(1.0) as usize
}

/// Channels removed from a `channels`-wide unit after `iteration` steps:
/// `floor(min(iteration * fraction, target) * channels)`, never the whole unit.
pub fn cumulative_removals(channels: usize, fraction: f64, target: f64, iteration: usize) -> usize {
    let rate = (iteration as f64 * fraction).min(target);
    let n = (rate * channels as f64 + 1e-9).floor() as usize;
    n.min(channels.saturating_sub(1))
}

fn uniform_prune(graph: &NetworkGraph, rate: f64) -> Result<NetworkGraph> {
    let groups: Vec<ChannelGroup> = prune_units(graph)
        .iter()
        .flat_map(|u| {
            let k = cumulative_removals(u.channels, 1.0, rate, 1);
            (0..k).map(move |c| u.group(c))
        })
        .collect();
    hard_prune(graph, &groups)
}

/// Smallest uniform channel rate whose pruned graph removes at least
/// `flops_target` of the FLOPs (bisection; the FLOPs curve is a step function).
pub fn channel_rate_for_flops(graph: &NetworkGraph, flops_target: f64, input_shape: &[usize]) -> Result<f64> {
    if !(0.0..1.0).contains(&flops_target) {
        return Err(Error::Config(format!("FLOPs target {flops_target} not in [0, 1)")));
    }
    let base = count_flops(graph, input_shape)? as f64;
    let goal = (1.0 - flops_target) * base;
    let (mut lo, mut hi) = (0.0f64, 0.999f64);
    if count_flops(&uniform_prune(graph, hi)?, input_shape)? as f64 > goal {
        return Err(Error::Config(format!("FLOPs target {flops_target} unreachable by channel pruning")));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if count_flops(&uniform_prune(graph, mid)?, input_shape)? as f64 <= goal {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn key(u: &PruneUnit) -> NodeId {
    u.layers[0]
}

fn draw_probes(trainer: &mut dyn Trainer, criterion: &Criterion, count: usize) -> Result<Vec<ProbeBatch>> {
    if criterion.needs_probe() {
        (0..count).map(|_| trainer.probe()).collect()
    } else {
        Ok(Vec::new())
    }
}

/// Removal sets for one iteration. `want[u]` is the cumulative goal for
/// unit `u`; `done[u]` what it already lost.
#[allow(clippy::too_many_arguments)]
fn select(
    criterion: &Criterion,
    scope: Scope,
    graph: &NetworkGraph,
    units: &[PruneUnit],
    removes: &[usize],
    global_remove: usize,
    probes: &[ProbeBatch],
    trainer: &dyn Trainer,
) -> Result<Vec<ChannelGroup>> {
    let loss = |t: &mut Trace, v: Var, l: &[usize]| trainer.loss(t, v, l);
    let scores = unit_scores(criterion, graph, units, removes, probes, &loss)?;
    let mut groups = Vec::new();
    match scope {
        Scope::PerLayer => {
            for ((u, s), &k) in units.iter().zip(&scores).zip(removes) {
                groups.extend(rank_ascending(s).into_iter().take(k).map(|c| u.group(c)));
            }
        }
        Scope::Global => {
            let mut flat: Vec<(usize, usize, f64)> = Vec::new();
            for (ui, s) in scores.iter().enumerate() {
                flat.extend(s.iter().enumerate().map(|(c, &v)| (ui, c, v)));
            }
            let order = rank_ascending(&flat.iter().map(|f| f.2).collect::<Vec<_>>());
            let mut left: Vec<usize> = units.iter().map(|u| u.channels).collect();
            let mut taken = 0;
            for i in order {
                if taken == global_remove {
                    break;
                }
                let (ui, c, _) = flat[i];
                if left[ui] > 1 {
                    left[ui] -= 1;
                    taken += 1;
                    groups.push(units[ui].group(c));
                }
            }
        }
    }
    Ok(groups)
}

fn run_schedule(
    graph: &NetworkGraph,
    criterion: &Criterion,
    schedule: &PruneSchedule,
    fraction: f64,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport)> {
    schedule.validate()?;
    if schedule.scope == Scope::Global && criterion.is_selection() {
        return Err(Error::Config(format!(
            "criterion {} selects per layer and cannot rank globally",
            criterion.label()
        )));
    }
    let target = match schedule.target_kind {
        TargetKind::Channels => schedule.target_compression,
        TargetKind::Flops => channel_rate_for_flops(graph, schedule.target_compression, &trainer.input_shape())?,
    };
    let initial_channels = total_conv_channels(graph);
    let initial: std::collections::BTreeMap<NodeId, usize> =
        prune_units(graph).iter().map(|u| (key(u), u.channels)).collect();
    let total0: usize = initial.values().sum();
    let mut report = StrategyReport::default();
    report.records.push(record(graph, trainer, 0, initial_channels, None)?);
    let mut graph = graph.clone();
    for t in 1..=iteration_count(fraction, target) {
        let units = prune_units(&graph);
        let removes: Vec<usize> = units
            .iter()
            .map(|u| {
                let c0 = initial.get(&key(u)).copied().unwrap_or(u.channels);
                cumulative_removals(c0, fraction, target, t).saturating_sub(c0 - u.channels)
            })
            .collect();
        let current: usize = units.iter().map(|u| u.channels).sum();
        let global_goal = ((t as f64 * fraction).min(target) * total0 as f64 + 1e-9).floor() as usize;
        let global_remove = global_goal.saturating_sub(total0 - current);
        let probes = draw_probes(trainer, criterion, schedule.ranking_epochs)?;
        let groups = select(criterion, schedule.scope, &graph, &units, &removes, global_remove, &probes, trainer)?;
        graph = hard_prune(&graph, &groups)?;
        trainer.graph_changed();
        let loss = train_epochs(&mut graph, trainer, schedule.retrain_epochs, &mut TrainHooks::default())?;
        report.records.push(record(&graph, trainer, t, initial_channels, loss)?);
    }
    Ok((graph, report))
}

/// Ranks once, removes the whole target in one rewrite, then retrains.
pub fn prune_one_step(
    graph: &NetworkGraph,
    criterion: &Criterion,
    schedule: &PruneSchedule,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport)> {
    let fraction = schedule.target_compression.max(f64::MIN_POSITIVE);
    run_schedule(graph, criterion, schedule, fraction.min(1.0), trainer)
}

/// Repeats rank / prune `fraction_per_iteration` of the initial channels /
/// retrain until the target is reached. Aborts on NaN metrics.
pub fn prune_iterative(
    graph: &NetworkGraph,
    criterion: &Criterion,
    schedule: &PruneSchedule,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport)> {
    run_schedule(graph, criterion, schedule, schedule.fraction_per_iteration, trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_defaults_take_ten_iterations() {
        let s = PruneSchedule::default();
        assert_eq!(iteration_count(s.fraction_per_iteration, s.target_compression), 10);
        assert_eq!(iteration_count(0.5, 0.5), 1);
        assert_eq!(iteration_count(0.3, 0.5), 2);
        assert_eq!(iteration_count(0.05, 0.0), 0);
    }

    #[test]
    fn cumulative_counts_match_hand_computation() {
        // 48 channels at 5%/iteration: floor(2.4 t) capped at floor(24)
        let got: Vec<usize> = (1..=10).map(|t| cumulative_removals(48, 0.05, 0.5, t)).collect();
        assert_eq!(got, vec![2, 4, 7, 9, 12, 14, 16, 19, 21, 24]);
        let small: Vec<usize> = (1..=10).map(|t| cumulative_removals(24, 0.05, 0.5, t)).collect();
        assert_eq!(small, vec![1, 2, 3, 4, 6, 7, 8, 9, 10, 12]);
        assert_eq!(cumulative_removals(1, 0.5, 0.9, 3), 0);
        assert_eq!(cumulative_removals(4, 1.0, 0.99, 1), 3);
    }

    #[test]
    fn schedule_validation() {
        let mut s = PruneSchedule::default();
        s.fraction_per_iteration = 0.0;
        assert!(s.validate().is_err());
        s.fraction_per_iteration = 0.1;
        s.target_compression = 1.0;
        assert!(s.validate().is_err());
        let parsed: PruneSchedule = toml::from_str("retrain_epochs = 2\nscope = \"global\"").unwrap();
        assert_eq!(parsed.retrain_epochs, 2);
        assert_eq!(parsed.scope, Scope::Global);
        assert!(toml::from_str::<PruneSchedule>("bogus = 1").is_err());
    }
}
