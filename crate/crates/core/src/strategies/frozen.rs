use std::collections::BTreeSet;

use super::{
    cumulative_removals, record, total_conv_channels, train_epochs, unit_scores, Criterion, StrategyReport,
    TrainHooks, Trainer,
};
use crate::criteria::rank_ascending;
use crate::error::{Error, Result};
use crate::graph::{hard_prune, prune_units, LayerKind, NetworkGraph, NodeId};
use crate::tensor::{Trace, Var};

/// Nodes allowed to train while `layer` is pruned: the layers of its unit,
/// affine layers on its channels, and the first parameterized consumers.
pub fn trainable_for_layer(graph: &NetworkGraph, layer: NodeId) -> Result<BTreeSet<NodeId>> {
    let unit = prune_units(graph)
        .into_iter()
        .find(|u| u.layers.contains(&layer))
        .ok_or_else(|| Error::invalid(format!("layer {} is not prunable", graph.node(layer).name)))?;
    let mut set: BTreeSet<NodeId> = unit.layers.iter().copied().collect();
    let mut stack: Vec<NodeId> = unit.layers.clone();
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        for &c in graph.consumers(n) {
            if !seen.insert(c) {
                continue;
            }
            match graph.node(c).kind {
                LayerKind::Conv { .. }
                | LayerKind::Dense { .. }
                | LayerKind::EmbeddingHead { .. }
                | LayerKind::PartHead { .. } => {
                    set.insert(c);
                }
                LayerKind::ChannelAffine { .. } => {
                    set.insert(c);
                    stack.push(c);
                }
                _ => stack.push(c),
            }
        }
    }
    if set.iter().all(|&n| graph.node(n).params.is_empty()) {
        return Err(Error::invalid("no trainable parameters"));
    }
    Ok(set)
}

/// Prunes one layer (with its coupled unit) to `target` and retrains with
/// every other parameter frozen.
pub fn prune_layerwise_frozen(
    graph: &NetworkGraph,
    layer: NodeId,
    criterion: &Criterion,
    target: f64,
    retrain_epochs: usize,
    trainer: &mut dyn Trainer,
) -> Result<(NetworkGraph, StrategyReport)> {
    if layer.0 >= graph.nodes().len() {
        return Err(Error::invalid(format!("unknown layer {layer}")));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!("target {target} not in [0, 1)")));
    }
    let unit = prune_units(graph)
        .into_iter()
        .find(|u| u.layers.contains(&layer))
        .ok_or_else(|| Error::invalid(format!("layer {} is not prunable", graph.node(layer).name)))?;
    let initial_channels = total_conv_channels(graph);
    let mut report = StrategyReport::default();
    report.records.push(record(graph, trainer, 0, initial_channels, None)?);
    let k = cumulative_removals(unit.channels, 1.0, target, 1);
    let probes = if criterion.needs_probe() { vec![trainer.probe()?] } else { Vec::new() };
    let scores = {
        let t: &dyn Trainer = trainer;
        let loss = |tr: &mut Trace, v: Var, l: &[usize]| t.loss(tr, v, l);
        unit_scores(criterion, graph, std::slice::from_ref(&unit), &[k], &probes, &loss)?
    };
    let groups: Vec<_> = rank_ascending(&scores[0]).into_iter().take(k).map(|c| unit.group(c)).collect();
    let mut pruned = hard_prune(graph, &groups)?;
    trainer.graph_changed();
    let trainable = trainable_for_layer(&pruned, layer)?;
    let loss = train_epochs(
        &mut pruned,
        trainer,
        retrain_epochs,
        &mut TrainHooks {
            regularizer: None,
            trainable: Some(&trainable),
        },
    )?;
    report.records.push(record(&pruned, trainer, 1, initial_channels, loss)?);
    Ok((pruned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_toy_resnet, ToyNetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trainable_set_covers_unit_and_consumers() {
        let g = build_toy_resnet(&ToyNetSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = g.find("stage2.0.a.conv").unwrap();
        let set = trainable_for_layer(&g, a).unwrap();
        let names: Vec<&str> = set.iter().map(|&n| g.node(n).name.as_str()).collect();
        assert!(names.contains(&"stage2.0.a.conv"));
        assert!(names.contains(&"stage2.0.b.conv"));
        assert!(!names.contains(&"stem.conv"));
        assert!(!names.contains(&"embedding"));
    }
}
