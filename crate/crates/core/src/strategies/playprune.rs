use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{total_conv_channels, unit_sum, IterationRecord, Regularizer, StrategyReport, TrainHooks, Trainer};
use crate::criteria::{channel_norms, rank_ascending, Norm};
use crate::error::{Error, Result};
use crate::graph::{count_flops, count_params, hard_prune, prune_units, NetworkGraph, NodeId, ParamVars, PruneUnit};
use crate::tensor::{Trace, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayPruneConfig {
    /// Tolerated accuracy drop, in rank-1 percentage points.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta_w")]
    pub delta_w: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Fraction of each unit's channels offered as candidates per epoch.
    #[serde(default = "default_alpha_pct")]
    pub alpha_pct: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_epsilon() -> f64 {
    1.0
}
fn default_delta_w() -> f64 {
    1.1
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_alpha_pct() -> f64 {
    0.10
}
fn default_epochs() -> usize {
    10
}

impl Default for PlayPruneConfig {
    fn default() -> Self {
        PlayPruneConfig {
            epsilon: default_epsilon(),
            delta_w: default_delta_w(),
            lambda: default_lambda(),
            alpha_pct: default_alpha_pct(),
            epochs: default_epochs(),
        }
    }
}

impl PlayPruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.delta_w > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("play-and-prune needs epsilon >= 0, delta_w > 0, lambda >= 0".into()));
        }
        if !(self.alpha_pct > 0.0 && self.alpha_pct <= 1.0) {
            return Err(Error::Config(format!("alpha_pct {} not in (0, 1]", self.alpha_pct)));
        }
        Ok(())
    }
}

/// Controller state of the pruning agent (AFP) and the rate controller (PRC).
#[derive(Clone, Debug, Serialize)]
pub struct PlayPruneState {
    pub config: PlayPruneConfig,
    /// Reference accuracy of the unpruned model, in points.
    pub xi: f64,
    /// Current adaptive threshold per unit (keyed by the unit's first layer).
    pub w_a: BTreeMap<NodeId, f64>,
    /// Last non-zero threshold, the `W'_A` the next update scales.
    base: BTreeMap<NodeId, f64>,
    pub t_r: f64,
    pub lambda_a: f64,
    /// Set when the last evaluation was unusable; no removal until it clears.
    pub paused: bool,
    #[serde(skip)]
    candidates: Vec<(PruneUnit, Vec<usize>)>,
}

fn unit_l1(graph: &NetworkGraph, unit: &PruneUnit) -> Vec<f64> {
    unit_sum(unit, |l| channel_norms(graph.param(l, 0), Norm::L1))
}

fn candidate_count(channels: usize, alpha_pct: f64) -> usize {
    if channels <= 1 {
        return 0;
    }
    ((alpha_pct * channels as f64 + 1e-9).floor() as usize).clamp(1, channels - 1)
}

/// Smallest threshold (bisection over the l1 range) below which at least
/// `count` channels fall.
pub(crate) fn histogram_threshold(l1: &[f64], count: usize) -> f64 {
    if count == 0 || l1.is_empty() {
        return 0.0;
    }
    let below = |t: f64| l1.iter().filter(|&&v| v < t).count();
    let min = l1.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = l1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (min, max + (max - min).abs().max(1e-12));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if below(mid) >= count {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

impl PlayPruneState {
    /// `xi` is the reference rank-1 in points. The first thresholds come
    /// from each unit's l1 histogram; `lambda_A` starts as if `C = xi`.
    pub fn new(graph: &NetworkGraph, config: PlayPruneConfig, xi: f64) -> Result<Self> {
        config.validate()?;
        let mut w_a = BTreeMap::new();
        for unit in prune_units(graph) {
            let l1 = unit_l1(graph, &unit);
            w_a.insert(unit.layers[0], histogram_threshold(&l1, candidate_count(unit.channels, config.alpha_pct)));
        }
        let t_r = config.epsilon;
        Ok(PlayPruneState {
            lambda_a: t_r * config.lambda,
            base: w_a.clone(),
            w_a,
            t_r,
            xi,
            paused: false,
            candidates: Vec::new(),
            config,
        })
    }

    /// `T_r = C - (xi - eps)` and `lambda_A = T_r * lambda` when positive,
    /// else both 0; `W_A = delta_w * T_r * W'_A`.
    pub fn controller_update(&mut self, accuracy: f64) {
        let gap = accuracy - (self.xi - self.config.epsilon);
        self.t_r = if gap > 0.0 { gap } else { 0.0 };
        self.lambda_a = self.t_r * self.config.lambda;
        for (k, w) in self.w_a.iter_mut() {
            let base = self.base.get(k).copied().unwrap_or(0.0);
            *w = self.config.delta_w * self.t_r * base;
            if *w > 0.0 {
                self.base.insert(*k, *w);
            }
        }
    }

    fn select_candidates(&mut self, graph: &NetworkGraph) {
        self.candidates = prune_units(graph)
            .into_iter()
            .map(|u| {
                let k = candidate_count(u.channels, self.config.alpha_pct);
                let order = rank_ascending(&unit_l1(graph, &u));
                let mut pick: Vec<usize> = order.into_iter().take(k).collect();
                pick.sort_unstable();
                (u, pick)
            })
            .collect();
    }
}

impl Regularizer for PlayPruneState {
    /// `lambda_A * ||U||_1` over the current candidates.
    fn penalty(&mut self, graph: &NetworkGraph, trace: &mut Trace, params: &ParamVars) -> Result<Option<Var>> {
        if self.lambda_a == 0.0 || self.candidates.is_empty() {
            return Ok(None);
        }
        let mut inputs = Vec::new();
        let mut partials = Vec::new();
        let mut value = 0.0f64;
        for (unit, pick) in &self.candidates {
            let mut mask = vec![false; unit.channels];
            pick.iter().for_each(|&c| mask[c] = true);
            for &l in &unit.layers {
                let w = graph.param(l, 0);
                let per = w.numel() / w.dim(0);
                let g: Vec<f32> = w
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        if mask[i / per] {
                            value += f64::from(x.abs());
                            (self.lambda_a as f32) * x.signum() * f32::from(x != 0.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                inputs.push(params.get(l)[0]);
                partials.push(g);
            }
        }
        trace.custom(inputs, (self.lambda_a * value) as f32, partials).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome {
    pub loss: f64,
    pub removed: usize,
    pub rolled_back: bool,
    /// Rank-1 in points after the epoch, if evaluation succeeded.
    pub accuracy: Option<f64>,
}

fn accuracy_points(trainer: &mut dyn Trainer, graph: &NetworkGraph) -> Option<(f64, f64)> {
    match trainer.evaluate(graph) {
        Ok(r) if r.rank1().is_finite() && r.map.is_finite() => Some((100.0 * r.rank1(), r.map)),
        _ => None,
    }
}

/// One AFP/PRC round: pick candidates, train with the l1 pressure, drop
/// candidates whose l1 fell below `W_A`, then update the controller. A
/// removal that takes accuracy below `xi - epsilon` is rolled back.
pub fn play_and_prune_epoch(
    graph: &mut NetworkGraph,
    state: &mut PlayPruneState,
    trainer: &mut dyn Trainer,
) -> Result<EpochOutcome> {
    state.select_candidates(graph);
    let loss = trainer.train_epoch(
        graph,
        &mut TrainHooks {
            regularizer: Some(state),
            trainable: None,
        },
    )?;
    let mut groups = Vec::new();
    if !state.paused {
        for (unit, pick) in &state.candidates {
            let threshold = state.w_a.get(&unit.layers[0]).copied().unwrap_or(0.0);
            let l1 = unit_l1(graph, unit);
            let mut left = unit.channels;
            for &c in pick {
                if l1[c] < threshold && left > 1 {
                    groups.push(unit.group(c));
                    left -= 1;
                }
            }
        }
    }
    let mut rolled_back = false;
    let mut removed = groups.len();
    if !groups.is_empty() {
        let pruned = hard_prune(graph, &groups)?;
        let ok = accuracy_points(trainer, &pruned).is_some_and(|(a, _)| a >= state.xi - state.config.epsilon);
        if ok {
            *graph = pruned;
            trainer.graph_changed();
        } else {
            rolled_back = true;
            removed = 0;
        }
    }
    let accuracy = accuracy_points(trainer, graph).map(|a| a.0);
    match accuracy {
        Some(a) => {
            state.paused = false;
            state.controller_update(a);
        }
        None => state.paused = true,
    }
    Ok(EpochOutcome {
        loss,
        removed,
        rolled_back,
        accuracy,
    })
}

/// Runs `config.epochs` rounds from a trained graph; `xi` is measured first.
pub fn prune_play_and_prune(
    graph: &NetworkGraph,
    config: &PlayPruneConfig,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport, PlayPruneState)> {
    let (xi, map0) =
        accuracy_points(trainer, graph).ok_or_else(|| Error::NanMetric("reference accuracy of the unpruned model".into()))?;
    let mut state = PlayPruneState::new(graph, config.clone(), xi)?;
    let initial_channels = total_conv_channels(graph);
    let shape = trainer.input_shape();
    let mut report = StrategyReport::default();
    let entry = |g: &NetworkGraph, iteration, rank1: f64, map, loss: Option<f64>| -> Result<IterationRecord> {
        Ok(IterationRecord {
            iteration,
            pruned_channels: initial_channels - total_conv_channels(g),
            flops: count_flops(g, &shape)?,
            params: count_params(g),
            rank1: rank1 / 100.0,
            map,
            loss,
        })
    };
    report.records.push(entry(graph, 0, xi, map0, None)?);
    let mut graph = graph.clone();
    for epoch in 1..=config.epochs {
        let out = play_and_prune_epoch(&mut graph, &mut state, trainer)?;
        if out.rolled_back {
            report.notes.push(format!("epoch {epoch}: removal rolled back"));
        }
        match accuracy_points(trainer, &graph) {
            Some((acc, map)) => report.records.push(entry(&graph, epoch, acc, map, Some(out.loss))?),
            None => report.notes.push(format!("epoch {epoch}: accuracy unavailable, pruning paused")),
        }
    }
    Ok((graph, report, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_toy_resnet, ToyNetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(xi: f64) -> PlayPruneState {
        let g = build_toy_resnet(&ToyNetSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        PlayPruneState::new(&g, PlayPruneConfig::default(), xi).unwrap()
    }

    #[test]
    fn no_pressure_at_or_below_tolerance() {
        let mut s = state(80.0);
        s.controller_update(79.0);
        assert_eq!((s.t_r, s.lambda_a), (0.0, 0.0));
        assert!(s.w_a.values().all(|w| *w == 0.0));
        s.controller_update(60.0);
        assert_eq!((s.t_r, s.lambda_a), (0.0, 0.0));
    }

    #[test]
    fn at_reference_accuracy_tr_is_epsilon() {
        let mut s = state(80.0);
        let before = s.w_a.clone();
        s.controller_update(80.0);
        assert!((s.t_r - 1.0).abs() < 1e-12);
        assert!((s.lambda_a - 1e-4).abs() < 1e-16);
        for (k, w) in &s.w_a {
            assert!((w - 1.1 * before[k]).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn pause_keeps_previous_base() {
        let mut s = state(80.0);
        let before = s.w_a.clone();
        s.controller_update(70.0);
        s.controller_update(80.0);
        for (k, w) in &s.w_a {
            assert!((w - 1.1 * before[k]).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn histogram_threshold_separates_count() {
        let l1 = [0.5, 0.1, 0.9, 0.3, 0.7];
        let t = histogram_threshold(&l1, 2);
        assert_eq!(l1.iter().filter(|&&v| v < t).count(), 2);
        assert!(t > 0.3 && t <= 0.3 + 1e-9);
        assert_eq!(candidate_count(24, 0.1), 2);
        assert_eq!(candidate_count(5, 0.1), 1);
        assert_eq!(candidate_count(1, 0.5), 0);
    }
}
