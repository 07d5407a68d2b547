//! Hard (structural) and soft (zeroizing) channel pruning.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::coupling::{all_group_index, fixed_channels};
use super::{LayerKind, LayerNode, NetworkGraph, NodeId};
use crate::error::{Error, Result};

/// Keep flags for every conv layer's output channels (`true` = keep).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    keep: BTreeMap<NodeId, Vec<bool>>,
}

impl PruneMask {
    pub fn all_keep(graph: &NetworkGraph) -> Self {
        let keep = graph
            .conv_ids()
            .into_iter()
            .map(|id| (id, vec![true; graph.out_channels(id).unwrap_or(0)]))
            .collect();
        PruneMask { keep }
    }

    pub fn from_layers(keep: BTreeMap<NodeId, Vec<bool>>) -> Self {
        PruneMask { keep }
    }

    pub fn keep(&self, layer: NodeId) -> Option<&[bool]> {
        self.keep.get(&layer).map(Vec::as_slice)
    }

    pub fn set(&mut self, layer: NodeId, channel: usize, keep: bool) {
        if let Some(v) = self.keep.get_mut(&layer) {
            if channel < v.len() {
                v[channel] = keep;
            }
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = (NodeId, &[bool])> {
        self.keep.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn masked_count(&self) -> usize {
        self.keep.values().flatten().filter(|k| !**k).count()
    }

    fn validate(&self, graph: &NetworkGraph) -> Result<()> {
        for (&layer, keep) in &self.keep {
            let node = graph.nodes().get(layer.0).ok_or_else(|| Error::invalid(format!("mask names unknown layer {layer}")))?;
            let expected = graph
                .out_channels(layer)
                .ok_or_else(|| Error::invalid(format!("mask names non-conv layer {}", node.name)))?;
            if keep.len() != expected {
                return Err(Error::MaskLength {
                    layer: node.name.clone(),
                    expected,
                    found: keep.len(),
                });
            }
        }
        Ok(())
    }

    fn removal(&self) -> BTreeMap<NodeId, BTreeSet<usize>> {
        self.keep
            .iter()
            .map(|(&l, k)| (l, k.iter().enumerate().filter(|(_, k)| !**k).map(|(c, _)| c).collect()))
            .filter(|(_, s): &(NodeId, BTreeSet<usize>)| !s.is_empty())
            .collect()
    }
}

/// Removes the selected channel groups, returning a new graph.
pub fn hard_prune(graph: &NetworkGraph, selections: &[super::ChannelGroup]) -> Result<NetworkGraph> {
    let mut removal: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
    for g in selections {
        for &(l, c) in &g.members {
            if graph.out_channels(l).is_none_or(|n| c >= n) {
                return Err(Error::invalid(format!("selection names invalid channel {c} of {l}")));
            }
            removal.entry(l).or_default().insert(c);
        }
    }
    remove_channels(graph, &removal)
}

/// Hard-removes every channel the mask zeroizes.
pub fn materialize(graph: &NetworkGraph, mask: &PruneMask) -> Result<NetworkGraph> {
    mask.validate(graph)?;
    remove_channels(graph, &mask.removal())
}

fn remove_channels(graph: &NetworkGraph, removal: &BTreeMap<NodeId, BTreeSet<usize>>) -> Result<NetworkGraph> {
    let name = |l: NodeId| graph.node(l).name.clone();
    let fixed: BTreeSet<(NodeId, usize)> = fixed_channels(graph).into_iter().collect();
    let groups = all_group_index(graph);
    for (&l, chans) in removal {
        for &c in chans {
            if fixed.contains(&(l, c)) {
                return Err(Error::invalid(format!(
                    "channel {c} of {} is coupled to a non-prunable layer",
                    name(l)
                )));
            }
            for &(ol, oc) in &groups[&(l, c)] {
                if !removal.get(&ol).is_some_and(|s| s.contains(&oc)) {
                    return Err(Error::PartialGroup {
                        layer: name(ol),
                        channel: oc,
                    });
                }
            }
        }
        if chans.len() >= graph.out_channels(l).unwrap_or(0) {
            return Err(Error::EmptyLayer(name(l)));
        }
    }

    let channels = graph.channel_counts();
    let mut keep: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes().len()];
    let mut nodes: Vec<LayerNode> = graph.nodes().to_vec();
    for &id in graph.topo_order() {
        let n = graph.node(id);
        let in_keep = n.inputs.first().map(|i| keep[i.0].clone()).unwrap_or_default();
        let out = &mut nodes[id.0];
        keep[id.0] = match n.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                bias,
                ..
            } => {
                let drop = removal.get(&id);
                let kept: Vec<usize> = (0..out_channels).filter(|c| !drop.is_some_and(|d| d.contains(c))).collect();
                let w = n.params[0].select(0, &kept)?.select(1, &in_keep)?;
                out.params[0] = w;
                if bias {
                    out.params[1] = n.params[1].select(0, &kept)?;
                }
                out.kind = LayerKind::Conv {
                    out_channels: kept.len(),
                    in_channels: in_keep.len(),
                    kernel,
                    stride,
                    pad,
                    bias,
                };
                kept
            }
            LayerKind::ChannelAffine { .. } => {
                out.params[0] = n.params[0].select(0, &in_keep)?;
                out.params[1] = n.params[1].select(0, &in_keep)?;
                out.kind = LayerKind::ChannelAffine {
                    channels: in_keep.len(),
                };
                in_keep
            }
            LayerKind::Dense { out_features, .. } => {
                out.params[0] = n.params[0].select(1, &in_keep)?;
                out.kind = LayerKind::Dense {
                    out_features,
                    in_features: in_keep.len(),
                };
                (0..out_features).collect()
            }
            LayerKind::EmbeddingHead { dim, .. } => {
                out.params[0] = n.params[0].select(1, &in_keep)?;
                out.kind = LayerKind::EmbeddingHead {
                    dim,
                    in_features: in_keep.len(),
                };
                (0..dim).collect()
            }
            LayerKind::PartHead { parts, part_dim, .. } => {
                out.params[0] = n.params[0].select(1, &in_keep)?;
                out.kind = LayerKind::PartHead {
                    parts,
                    part_dim,
                    in_features: in_keep.len(),
                };
                (0..parts * part_dim).collect()
            }
            LayerKind::Input { .. } => (0..channels[id.0]).collect(),
            LayerKind::Add => {
                let other = &keep[n.inputs[1].0];
                if *other != in_keep {
                    return Err(Error::InvalidGraph {
                        node: n.name.clone(),
                        reason: "add operands would keep different channels".into(),
                    });
                }
                in_keep
            }
            _ => in_keep,
        };
    }
    NetworkGraph::new(nodes)
}

/// Zeroizes the masked conv channels and the affine parameters that only
/// see zeroized channels. The architecture is unchanged.
pub fn soft_prune_apply(graph: &NetworkGraph, mask: &PruneMask) -> Result<NetworkGraph> {
    mask.validate(graph)?;
    let mut out = graph.clone();
    let channels = graph.channel_counts();
    let mut zero: HashMap<NodeId, Vec<bool>> = HashMap::new();
    for &id in graph.topo_order() {
        let n = graph.node(id);
        let z = match n.kind {
            LayerKind::Conv { .. } => {
                let z: Vec<bool> = match mask.keep(id) {
                    Some(k) => k.iter().map(|k| !k).collect(),
                    None => vec![false; channels[id.0]],
                };
                let per_out = n.params[0].numel() / channels[id.0];
                let node = &mut out.nodes[id.0];
                for (c, _) in z.iter().enumerate().filter(|(_, z)| **z) {
                    node.params[0].data_mut()[c * per_out..(c + 1) * per_out].fill(0.0);
                    if let Some(b) = node.params.get_mut(1) {
                        b.data_mut()[c] = 0.0;
                    }
                }
                z
            }
            LayerKind::Add => {
                let (a, b) = (&zero[&n.inputs[0]], &zero[&n.inputs[1]]);
                a.iter().zip(b).map(|(x, y)| *x && *y).collect()
            }
            LayerKind::ChannelAffine { .. } => {
                let z = zero[&n.inputs[0]].clone();
                let node = &mut out.nodes[id.0];
                for (c, _) in z.iter().enumerate().filter(|(_, z)| **z) {
                    node.params[0].data_mut()[c] = 0.0;
                    node.params[1].data_mut()[c] = 0.0;
                }
                z
            }
            LayerKind::Relu | LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool => {
                zero[&n.inputs[0]].clone()
            }
            _ => vec![false; channels[id.0]],
        };
        zero.insert(id, z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{coupled_channel_groups, count_params, ChannelGroup, GraphBuilder};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> (NetworkGraph, NodeId, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c1 = b.conv("c1", x, 4, 3, 1, 1, true);
        let r = b.relu("r", c1);
        let c2 = b.conv("c2", r, 5, 3, 1, 1, true);
        let p = b.global_avg_pool("gap", c2);
        b.embedding("emb", p, 6);
        (b.build(&mut ChaCha8Rng::seed_from_u64(3)).unwrap(), c1, c2)
    }

    #[test]
    fn removes_input_slices_of_consumer() {
        let (g, c1, c2) = chain();
        let before = count_params(&g);
        let sel = [ChannelGroup::single(c1, 1), ChannelGroup::single(c1, 3)];
        let p = hard_prune(&g, &sel).unwrap();
        assert_eq!(p.param(c2, 0).shape(), &[5, 2, 3, 3]);
        assert_eq!(p.param(c1, 0).shape(), &[2, 3, 3, 3]);
        // two output slices + biases of c1, two input slices of c2
        assert_eq!(before - count_params(&p), 2 * (27 + 1) + 2 * 5 * 9);
    }

    #[test]
    fn refuses_to_empty_a_layer() {
        let (g, c1, _) = chain();
        let sel: Vec<_> = (0..4).map(|c| ChannelGroup::single(c1, c)).collect();
        assert!(matches!(hard_prune(&g, &sel), Err(Error::EmptyLayer(_))));
    }

    #[test]
    fn partial_group_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let s = b.conv("s", x, 4, 3, 1, 1, false);
        let o = b.conv("o", s, 4, 3, 1, 1, false);
        let a = b.add("sum", o, s);
        b.global_avg_pool("gap", a);
        let g = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = hard_prune(&g, &[ChannelGroup::single(o, 2)]).unwrap_err();
        assert!(matches!(err, Error::PartialGroup { channel: 2, .. }));
        let whole = coupled_channel_groups(&g)[2].clone();
        let p = hard_prune(&g, &[whole]).unwrap();
        assert_eq!(p.out_channels(o), Some(3));
        assert_eq!(p.out_channels(s), Some(3));
    }

    #[test]
    fn all_keep_mask_is_identity() {
        let (g, _, _) = chain();
        let m = PruneMask::all_keep(&g);
        assert_eq!(soft_prune_apply(&g, &m).unwrap(), g);
        assert_eq!(materialize(&g, &m).unwrap(), g);
    }

    #[test]
    fn soft_then_materialize_matches() {
        let (g, c1, _) = chain();
        let mut m = PruneMask::all_keep(&g);
        m.set(c1, 0, false);
        m.set(c1, 2, false);
        let soft = soft_prune_apply(&g, &m).unwrap();
        let hard = materialize(&soft, &m).unwrap();
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let d = soft.predict(&x).unwrap().max_abs_diff(&hard.predict(&x).unwrap()).unwrap();
        assert!(d <= 1e-6, "{d}");
    }

    #[test]
    fn mask_length_checked() {
        let (g, c1, _) = chain();
        let mut keep = BTreeMap::new();
        keep.insert(c1, vec![true; 3]);
        let err = soft_prune_apply(&g, &PruneMask::from_layers(keep)).unwrap_err();
        assert!(matches!(err, Error::MaskLength { expected: 4, found: 3, .. }));
    }
}
