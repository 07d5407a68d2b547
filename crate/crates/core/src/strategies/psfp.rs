use serde::{Deserialize, Serialize};

use super::{record, total_conv_channels, unit_sum, StrategyReport, TrainHooks, Trainer};
use crate::criteria::{channel_norms, rank_ascending, Norm};
use crate::error::{Error, Result};
use crate::graph::{materialize, prune_units, soft_prune_apply, NetworkGraph, PruneMask};

/// Progressive soft pruning: `P'(epoch) = a * exp(-k * epoch) + b` with
/// `b = P`, `a = -P` and `k = ln 4 / (N * D)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfpState {
    pub p_final: f64,
    pub decay: f64,
    pub epochs: usize,
    pub norm: Norm,
    pub a: f64,
    pub b: f64,
    pub k: f64,
    pub epoch: usize,
    #[serde(skip)]
    pub mask: Option<PruneMask>,
}

impl PsfpState {
    pub fn new(p_final: f64, decay: f64, epochs: usize, norm: Norm) -> Result<Self> {
        if !(decay > 0.0 && decay.is_finite()) {
            return Err(Error::Config(format!("pruning rate decay {decay} must be positive")));
        }
        if !(0.0..1.0).contains(&p_final) {
            return Err(Error::Config(format!("final pruning rate {p_final} not in [0, 1)")));
        }
        if epochs == 0 {
            return Err(Error::Config("soft pruning needs at least one epoch".into()));
        }
        Ok(PsfpState {
            p_final,
            decay,
            epochs,
            norm,
            a: -p_final,
            b: p_final,
            k: 4f64.ln() / (epochs as f64 * decay),
            epoch: 0,
            mask: None,
        })
    }
}

pub fn psfp_rate(state: &PsfpState, epoch: f64) -> f64 {
    state.a * (-state.k * epoch).exp() + state.b
}

/// Zeroes the bottom `rate` fraction (by norm) of every prune unit.
fn rate_mask(graph: &NetworkGraph, rate: f64, norm: Norm) -> PruneMask {
    let mut mask = PruneMask::all_keep(graph);
    for unit in prune_units(graph) {
        let k = ((rate * unit.channels as f64 + 1e-9).floor() as usize).min(unit.channels - 1);
        let scores = unit_sum(&unit, |l| channel_norms(graph.param(l, 0), norm));
        for c in rank_ascending(&scores).into_iter().take(k) {
            for &l in &unit.layers {
                mask.set(l, c, false);
            }
        }
    }
    mask
}

/// Trains `state.epochs` epochs, re-zeroizing the weakest `P'(epoch)`
/// channels after each; zeroized channels keep training and may recover.
/// Finally ranks at `P` and materializes. Records report the compact
/// equivalent of the current mask.
pub fn psfp_train(
    graph: &NetworkGraph,
    state: &mut PsfpState,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport)> {
    let initial_channels = total_conv_channels(graph);
    let mut report = StrategyReport::default();
    report.records.push(record(graph, trainer, 0, initial_channels, None)?);
    let mut graph = graph.clone();
    let mut loss = None;
    for epoch in 1..=state.epochs {
        loss = Some(trainer.train_epoch(&mut graph, &mut TrainHooks::default())?);
        state.epoch = epoch;
        let mask = rate_mask(&graph, psfp_rate(state, epoch as f64), state.norm);
        graph = soft_prune_apply(&graph, &mask)?;
        let compact = materialize(&graph, &mask)?;
        report.records.push(record(&compact, trainer, epoch, initial_channels, loss)?);
        state.mask = Some(mask);
    }
    let mask = rate_mask(&graph, state.p_final, state.norm);
    let compact = materialize(&soft_prune_apply(&graph, &mask)?, &mask)?;
    trainer.graph_changed();
    report.records.push(record(&compact, trainer, state.epochs + 1, initial_channels, loss)?);
    report.notes.push(format!(
        "psfp: P'(e) = {:.6} * exp(-{:.6} e) + {:.6}",
        state.a, state.k, state.b
    ));
    state.mask = Some(mask);
    Ok((compact, report))
}
