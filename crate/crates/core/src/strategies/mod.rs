//! Pruning strategies: one-step, iterative, regularized (Auto-Balanced,
//! Play-and-Prune), progressive soft pruning and layer-wise frozen pruning.
//!
//! Strategies drive a [`Trainer`], which owns the data, the optimizer and
//! any training-only heads. Channels are always removed per
//! [`PruneUnit`](crate::graph::PruneUnit): all layers of a residual-coupled
//! unit lose the same channel indices.

mod autobalanced;
mod criterion;
mod frozen;
mod playprune;
mod psfp;
mod schedule;

pub use autobalanced::{autobalanced_train_step, prune_autobalanced, AutoBalancedConfig, AutoBalancedState};
pub use criterion::{unit_scores, Criterion};
pub use frozen::{prune_layerwise_frozen, trainable_for_layer};
pub use playprune::{play_and_prune_epoch, prune_play_and_prune, PlayPruneConfig, PlayPruneState};
pub use psfp::{psfp_rate, psfp_train, PsfpState};
pub use schedule::{
    channel_rate_for_flops, cumulative_removals, iteration_count, prune_iterative, prune_one_step, PruneSchedule,
    Scope, TargetKind,
};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::criteria::ProbeBatch;
use crate::error::{Error, Result};
use crate::graph::{count_flops, count_params, NetworkGraph, NodeId, ParamVars, PruneUnit};
use crate::reid::EvalReport;
use crate::tensor::{Trace, Var};

/// Extra loss term added on every training step.
pub trait Regularizer {
    /// Records the penalty on `trace`; `None` skips it for this step.
    fn penalty(&mut self, graph: &NetworkGraph, trace: &mut Trace, params: &ParamVars) -> Result<Option<Var>>;
}

/// Per-call training options.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub regularizer: Option<&'a mut dyn Regularizer>,
    /// When set, only parameters of these nodes are updated.
    pub trainable: Option<&'a BTreeSet<NodeId>>,
}

/// Training and evaluation services a strategy needs.
pub trait Trainer {
    /// `[1, C, H, W]` of one input image, for FLOPs accounting.
    fn input_shape(&self) -> [usize; 4];

    /// One optimizer step on `batch`; returns the loss (penalty included).
    fn train_step(&mut self, graph: &mut NetworkGraph, batch: &ProbeBatch, hooks: &mut TrainHooks<'_>) -> Result<f64>;

    /// One pass over the training set; returns the mean loss.
    fn train_epoch(&mut self, graph: &mut NetworkGraph, hooks: &mut TrainHooks<'_>) -> Result<f64>;

    /// Rank-1/mAP on the validation split.
    fn evaluate(&mut self, graph: &NetworkGraph) -> Result<EvalReport>;

    /// A labelled batch for data-driven criteria.
    fn probe(&mut self) -> Result<ProbeBatch>;

    /// The task loss on top of the network output.
    fn loss(&self, trace: &mut Trace, output: Var, labels: &[usize]) -> Result<Var>;

    /// Called after every structural change so optimizer state can be reset.
    fn graph_changed(&mut self) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Conv channels removed (or zeroized) relative to the starting graph.
    pub pruned_channels: usize,
    pub flops: u64,
    pub params: u64,
    pub rank1: f64,
    pub map: f64,
    /// Mean training loss of the last epoch; absent before any training.
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub records: Vec<IterationRecord>,
    /// Free-form diagnostics (e.g. skipped penalty steps, paused pruning).
    pub notes: Vec<String>,
}

impl StrategyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,pruned_channels,flops,params,rank1,mAP,loss\n");
        for r in &self.records {
            let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration, r.pruned_channels, r.flops, r.params, r.rank1, r.map, loss
            );
        }
        out
    }

    pub fn flops(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.flops).collect()
    }
}

pub(crate) fn total_conv_channels(graph: &NetworkGraph) -> usize {
    graph.conv_ids().iter().filter_map(|&c| graph.out_channels(c)).sum()
}

/// Evaluates `graph` and builds a record; NaN metrics abort.
pub(crate) fn record(
    graph: &NetworkGraph,
    trainer: &mut dyn Trainer,
    iteration: usize,
    initial_channels: usize,
    loss: Option<f64>,
) -> Result<IterationRecord> {
    let eval = trainer.evaluate(graph)?;
    if eval.rank1().is_nan() || eval.map.is_nan() {
        return Err(Error::NanMetric(format!("iteration {iteration}")));
    }
    Ok(IterationRecord {
        iteration,
        pruned_channels: initial_channels - total_conv_channels(graph),
        flops: count_flops(graph, &trainer.input_shape())?,
        params: count_params(graph),
        rank1: eval.rank1(),
        map: eval.map,
        loss,
    })
}

pub(crate) fn train_epochs(
    graph: &mut NetworkGraph,
    trainer: &mut dyn Trainer,
    epochs: usize,
    hooks: &mut TrainHooks<'_>,
) -> Result<Option<f64>> {
    let mut loss = None;
    for _ in 0..epochs {
        loss = Some(trainer.train_epoch(graph, hooks)?);
    }
    Ok(loss)
}

/// Summed per-layer values of a unit, one entry per channel.
pub(crate) fn unit_sum(unit: &PruneUnit, per_layer: impl Fn(NodeId) -> Vec<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; unit.channels];
    for &l in &unit.layers {
        for (a, v) in acc.iter_mut().zip(per_layer(l)) {
            *a += v;
        }
    }
    acc
}
