use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    cumulative_removals, iteration_count, record, total_conv_channels, train_epochs, unit_sum, PruneSchedule,
    Regularizer, StrategyReport, TrainHooks, Trainer,
};
use crate::criteria::{channel_norms, partition_by_magnitude, rank_ascending, Norm, Partition, ProbeBatch};
use crate::error::{Error, Result};
use crate::graph::{hard_prune, prune_units, NetworkGraph, NodeId, ParamVars, PruneUnit};
use crate::tensor::{Trace, Var};

const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoBalancedConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1e-3
}

impl Default for AutoBalancedConfig {
    fn default() -> Self {
        AutoBalancedConfig { alpha: default_alpha() }
    }
}

#[derive(Clone, Debug)]
struct UnitPartition {
    unit: PruneUnit,
    partition: Partition,
    /// Per channel; positive on the prune side, negative on the remain side.
    lambda: Vec<f64>,
}

/// Penalty state: `S(P) = sum lambda ||W||^2` over weak channels, `S(R)`
/// likewise over strong ones, and `tau = -alpha S(P) / S(R)`.
#[derive(Clone, Debug)]
pub struct AutoBalancedState {
    pub alpha: f64,
    units: Vec<UnitPartition>,
    pub s_p: f64,
    pub s_r: f64,
    pub tau: f64,
    /// Steps where `S(R) = 0` left `tau` undefined and the penalty was skipped.
    pub skipped_steps: usize,
}

/// `lambda = 1 + ln((theta + eps) / (M + eps))` for weak channels and
/// `-1 - ln((M + eps) / (theta + eps))` for strong ones.
pub(crate) fn lambdas(m: &[f64], partition: &Partition) -> Vec<f64> {
    let theta = partition.theta;
    let mut lambda = vec![0.0; m.len()];
    for &j in &partition.prune {
        lambda[j] = 1.0 + ((theta + EPS) / (m[j] + EPS)).ln();
    }
    for &j in &partition.remain {
        lambda[j] = -1.0 - ((m[j] + EPS) / (theta + EPS)).ln();
    }
    lambda
}

impl AutoBalancedState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {alpha} must be finite and non-negative")));
        }
        Ok(AutoBalancedState {
            alpha,
            units: Vec::new(),
            s_p: 0.0,
            s_r: 0.0,
            tau: 0.0,
            skipped_steps: 0,
        })
    }

    /// Re-partitions every unit listed in `remain` (unit key -> channels to
    /// keep). Units not listed, or asked to keep all channels, are not penalized.
    pub fn refresh(&mut self, graph: &NetworkGraph, remain: &BTreeMap<NodeId, usize>) -> Result<()> {
        self.units.clear();
        for unit in prune_units(graph) {
            let Some(&r) = remain.get(&unit.layers[0]) else { continue };
            if r >= unit.channels {
                continue;
            }
            let m = unit_sum(&unit, |l| channel_norms(graph.param(l, 0), Norm::L1));
            let partition = partition_by_magnitude(&m, r)?;
            let lambda = lambdas(&m, &partition);
            self.units.push(UnitPartition { unit, partition, lambda });
        }
        Ok(())
    }

    pub fn partitions(&self) -> impl Iterator<Item = (&PruneUnit, &Partition)> {
        self.units.iter().map(|u| (&u.unit, &u.partition))
    }
}

/// Value and per-layer weight gradients of `alpha S(P) + tau S(R)` with
/// `tau` held constant. Returns `None` when `S(R) = 0`.
pub(crate) struct PenaltyTerms {
    pub s_p: f64,
    pub s_r: f64,
    pub tau: f64,
    pub value: f64,
    pub grads: Vec<(NodeId, Vec<f32>)>,
}

fn penalty_terms(graph: &NetworkGraph, alpha: f64, units: &[UnitPartition]) -> Option<PenaltyTerms> {
    let (mut s_p, mut s_r) = (0.0, 0.0);
    let mut sq: Vec<Vec<Vec<f64>>> = Vec::new();
    for u in units {
        let per_layer: Vec<Vec<f64>> = u
            .unit
            .layers
            .iter()
            .map(|&l| {
                let w = graph.param(l, 0);
                let per = w.numel() / w.dim(0);
                w.data().chunks(per).map(|s| s.iter().map(|&v| f64::from(v) * f64::from(v)).sum()).collect()
            })
            .collect();
        for layer in &per_layer {
            for &j in &u.partition.prune {
                s_p += u.lambda[j] * layer[j];
            }
            for &j in &u.partition.remain {
                s_r += u.lambda[j] * layer[j];
            }
        }
        sq.push(per_layer);
    }
    if s_r == 0.0 {
        return None;
    }
    let tau = -alpha * s_p / s_r;
    let mut grads = Vec::new();
    for u in units {
        let in_p: Vec<bool> = {
            let mut v = vec![false; u.unit.channels];
            u.partition.prune.iter().for_each(|&j| v[j] = true);
            v
        };
        for &l in &u.unit.layers {
            let w = graph.param(l, 0);
            let per = w.numel() / w.dim(0);
            let g = w
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let j = i / per;
                    let coef = if in_p[j] { alpha } else { tau };
                    (2.0 * coef * u.lambda[j] * f64::from(x)) as f32
                })
                .collect();
            grads.push((l, g));
        }
    }
    Some(PenaltyTerms {
        s_p,
        s_r,
        tau,
        value: alpha * s_p + tau * s_r,
        grads,
    })
}

impl Regularizer for AutoBalancedState {
    fn penalty(&mut self, graph: &NetworkGraph, trace: &mut Trace, params: &ParamVars) -> Result<Option<Var>> {
        if self.units.is_empty() {
            return Ok(None);
        }
        let Some(terms) = penalty_terms(graph, self.alpha, &self.units) else {
            self.skipped_steps += 1;
            return Ok(None);
        };
        self.s_p = terms.s_p;
        self.s_r = terms.s_r;
        self.tau = terms.tau;
        if self.alpha == 0.0 {
            return Ok(None);
        }
        let inputs = terms.grads.iter().map(|(l, _)| params.get(*l)[0]).collect();
        let partials = terms.grads.into_iter().map(|(_, g)| g).collect();
        trace.custom(inputs, terms.value as f32, partials).map(Some)
    }
}

/// One optimizer step with the Auto-Balanced penalty added to the task loss.
pub fn autobalanced_train_step(
    graph: &mut NetworkGraph,
    state: &mut AutoBalancedState,
    trainer: &mut dyn Trainer,
    batch: &ProbeBatch,
) -> Result<f64> {
    let mut hooks = TrainHooks {
        regularizer: Some(state),
        trainable: None,
    };
    trainer.train_step(graph, batch, &mut hooks)
}

/// Iterative Auto-Balanced pruning: each iteration partitions every unit by
/// l1 magnitude, trains `ranking_epochs` with the penalty, removes the
/// weakest channels and retrains `retrain_epochs` without it.
pub fn prune_autobalanced(
    graph: &NetworkGraph,
    config: &AutoBalancedConfig,
    schedule: &PruneSchedule,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport, AutoBalancedState)> {
    schedule.validate()?;
    let mut state = AutoBalancedState::new(config.alpha)?;
    let fraction = schedule.fraction_per_iteration;
    let target = schedule.target_compression;
    let initial_channels = total_conv_channels(graph);
    let initial: BTreeMap<NodeId, usize> = prune_units(graph).iter().map(|u| (u.layers[0], u.channels)).collect();
    let mut report = StrategyReport::default();
    report.records.push(record(graph, trainer, 0, initial_channels, None)?);
    let mut graph = graph.clone();
    for t in 1..=iteration_count(fraction, target) {
        let remain: BTreeMap<NodeId, usize> = initial
            .iter()
            .map(|(&k, &c0)| (k, c0 - cumulative_removals(c0, fraction, target, t)))
            .collect();
        state.refresh(&graph, &remain)?;
        let skipped = state.skipped_steps;
        train_epochs(
            &mut graph,
            trainer,
            schedule.ranking_epochs,
            &mut TrainHooks {
                regularizer: Some(&mut state),
                trainable: None,
            },
        )?;
        if state.skipped_steps > skipped {
            report
                .notes
                .push(format!("iteration {t}: penalty skipped on {} steps (S(R) = 0)", state.skipped_steps - skipped));
        }
        let mut groups = Vec::new();
        for unit in prune_units(&graph) {
            let keep = remain.get(&unit.layers[0]).copied().unwrap_or(unit.channels);
            let m = unit_sum(&unit, |l| channel_norms(graph.param(l, 0), Norm::L1));
            let k = unit.channels.saturating_sub(keep);
            groups.extend(rank_ascending(&m).into_iter().take(k).map(|c| unit.group(c)));
        }
        graph = hard_prune(&graph, &groups)?;
        trainer.graph_changed();
        let loss = train_epochs(&mut graph, trainer, schedule.retrain_epochs, &mut TrainHooks::default())?;
        report.records.push(record(&graph, trainer, t, initial_channels, loss)?);
    }
    Ok((graph, report, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_channel(w: [f32; 4]) -> (NetworkGraph, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.input("in", 2);
        let c = b.conv("c", x, 2, 1, 1, 0, false);
        let g = b.global_avg_pool("gap", c);
        b.dense("fc", g, 2);
        let mut graph = b.build(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        *graph.param_mut(c, 0) = Tensor::new(vec![2, 2, 1, 1], w.to_vec()).unwrap();
        (graph, c)
    }

    #[test]
    fn lambda_signs_follow_partition() {
        let m = [0.1, 2.0, 1.0, 0.5];
        let p = partition_by_magnitude(&m, 2).unwrap();
        let l = lambdas(&m, &p);
        assert!(p.prune == vec![0, 3] && p.remain == vec![1, 2]);
        assert!(l[0] > l[3] && l[3] > 1.0);
        assert!(l[1] < l[2] && l[2] < -1.0);
    }

    #[test]
    fn gradient_matches_hand_derivative() {
        let (graph, c) = two_channel([0.1, -0.2, 1.0, 2.0]);
        let mut state = AutoBalancedState::new(0.5).unwrap();
        state.refresh(&graph, &BTreeMap::from([(c, 1)])).unwrap();
        let t = penalty_terms(&graph, 0.5, &state.units).unwrap();
        let (m0, m1) = (0.3f64, 3.0f64);
        let theta = 0.5 * (m0 + m1);
        let lp = 1.0 + ((theta + EPS) / (m0 + EPS)).ln();
        let lr = -1.0 - ((m1 + EPS) / (theta + EPS)).ln();
        let sp = lp * (0.01 + 0.04);
        let sr = lr * (1.0 + 4.0);
        let tau = -0.5 * sp / sr;
        assert!((t.s_p - sp).abs() < 1e-6 && (t.s_r - sr).abs() < 1e-6 && (t.tau - tau).abs() < 1e-6);
        let expect = [2.0 * 0.5 * lp * 0.1, 2.0 * 0.5 * lp * -0.2, 2.0 * tau * lr * 1.0, 2.0 * tau * lr * 2.0];
        for (g, e) in t.grads[0].1.iter().zip(expect) {
            assert!((f64::from(*g) - e).abs() < 1e-6, "{g} vs {e}");
        }
        // tau balances the two sums
        assert!(t.value.abs() < 1e-9);
    }

    #[test]
    fn zero_remaining_weights_skip_the_step() {
        let (graph, c) = two_channel([0.0; 4]);
        let mut state = AutoBalancedState::new(0.5).unwrap();
        state.refresh(&graph, &BTreeMap::from([(c, 1)])).unwrap();
        let mut trace = Trace::new();
        let params = graph.bind(&mut trace);
        assert!(state.penalty(&graph, &mut trace, &params).unwrap().is_none());
        assert_eq!(state.skipped_steps, 1);
    }

    #[test]
    fn zero_alpha_adds_nothing() {
        let (graph, c) = two_channel([0.1, -0.2, 1.0, 2.0]);
        let mut state = AutoBalancedState::new(0.0).unwrap();
        state.refresh(&graph, &BTreeMap::from([(c, 1)])).unwrap();
        let mut trace = Trace::new();
        let params = graph.bind(&mut trace);
        assert!(state.penalty(&graph, &mut trace, &params).unwrap().is_none());
        assert!(AutoBalancedState::new(-1.0).is_err());
    }
}
