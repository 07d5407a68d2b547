//! Residual channel coupling.
//!
//! Every output channel of a producer layer (input, conv, linear) is an
//! element of a union-find forest. Channel-wise layers forward their input's
//! channels untouched; an `Add` unites its operands index-wise. The classes
//! that contain only convolution channels are the prunable groups.

use std::collections::BTreeMap;

use super::{LayerKind, NetworkGraph, NodeId};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelGroup {
    /// `(conv layer, output channel)` pairs, sorted.
    pub members: Vec<(NodeId, usize)>,
}

impl ChannelGroup {
    pub fn single(layer: NodeId, channel: usize) -> Self {
        ChannelGroup {
            members: vec![(layer, channel)],
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.iter().map(|m| m.0)
    }
}

/// Convolutions whose channels are pruned together, one group per channel
/// index. Coupling is index-wise, so group `c` is `{(l, c) : l in layers}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneUnit {
    pub layers: Vec<NodeId>,
    pub channels: usize,
}

impl PruneUnit {
    pub fn group(&self, channel: usize) -> ChannelGroup {
        ChannelGroup {
            members: self.layers.iter().map(|&l| (l, channel)).collect(),
        }
    }

    pub fn is_coupled(&self) -> bool {
        self.layers.len() > 1
    }
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// For every node, the producer whose channel indexing it carries.
pub(crate) fn channel_origins(graph: &NetworkGraph) -> Vec<NodeId> {
    let mut origin = vec![NodeId(0); graph.nodes().len()];
    for &id in graph.topo_order() {
        let n = graph.node(id);
        origin[id.0] = match n.kind {
            LayerKind::Input { .. }
            | LayerKind::Conv { .. }
            | LayerKind::Dense { .. }
            | LayerKind::EmbeddingHead { .. }
            | LayerKind::PartHead { .. } => id,
            _ => origin[n.inputs[0].0],
        };
    }
    origin
}

/// Equivalence classes of all producer channels, including unprunable ones.
/// Returned as `(members, contains_non_conv_producer)`.
fn all_classes(graph: &NetworkGraph) -> Vec<(Vec<(NodeId, usize)>, bool)> {
    let channels = graph.channel_counts();
    let origin = channel_origins(graph);
    let mut offset = vec![usize::MAX; graph.nodes().len()];
    let mut elems = Vec::new();
    for n in graph.nodes() {
        if origin[n.id.0] == n.id {
            offset[n.id.0] = elems.len();
            elems.extend((0..channels[n.id.0]).map(|c| (n.id, c)));
        }
    }
    let mut dsu = Dsu {
        parent: (0..elems.len()).collect(),
    };
    for n in graph.nodes() {
        if matches!(n.kind, LayerKind::Add) {
            let (a, b) = (origin[n.inputs[0].0], origin[n.inputs[1].0]);
            for c in 0..channels[n.id.0] {
                dsu.union(offset[a.0] + c, offset[b.0] + c);
            }
        }
    }
    let mut classes: BTreeMap<usize, (Vec<(NodeId, usize)>, bool)> = BTreeMap::new();
    for (i, &(node, c)) in elems.iter().enumerate() {
        let e = classes.entry(dsu.find(i)).or_default();
        e.0.push((node, c));
        e.1 |= !graph.node(node).kind.is_conv();
    }
    classes.into_values().collect()
}

/// Prunable channel groups, sorted by their smallest member.
pub fn coupled_channel_groups(graph: &NetworkGraph) -> Vec<ChannelGroup> {
    let mut groups: Vec<ChannelGroup> = all_classes(graph)
        .into_iter()
        .filter(|(_, fixed)| !fixed)
        .map(|(mut members, _)| {
            members.sort();
            ChannelGroup { members }
        })
        .collect();
    groups.sort();
    groups
}

/// Class membership of every conv channel: `(layer, c)` -> its class.
pub(crate) fn all_group_index(graph: &NetworkGraph) -> std::collections::HashMap<(NodeId, usize), Vec<(NodeId, usize)>> {
    let mut index = std::collections::HashMap::new();
    for (members, _) in all_classes(graph) {
        for &m in &members {
            index.insert(m, members.clone());
        }
    }
    index
}

/// Conv channels that can never be removed because they are coupled to the
/// network input or a linear layer.
pub(crate) fn fixed_channels(graph: &NetworkGraph) -> Vec<(NodeId, usize)> {
    all_classes(graph)
        .into_iter()
        .filter(|(_, fixed)| *fixed)
        .flat_map(|(m, _)| m)
        .filter(|(l, _)| graph.node(*l).kind.is_conv())
        .collect()
}

/// Prunable groups bundled by the set of layers they span, in order of the
/// first layer's position in the topological order.
pub fn prune_units(graph: &NetworkGraph) -> Vec<PruneUnit> {
    let mut by_layers: BTreeMap<Vec<NodeId>, usize> = BTreeMap::new();
    for g in coupled_channel_groups(graph) {
        let layers: Vec<NodeId> = g.layers().collect();
        *by_layers.entry(layers).or_default() += 1;
    }
    let pos: Vec<usize> = {
        let mut p = vec![0; graph.nodes().len()];
        for (i, id) in graph.topo_order().iter().enumerate() {
            p[id.0] = i;
        }
        p
    };
    let mut units: Vec<PruneUnit> = by_layers
        .into_iter()
        .map(|(layers, channels)| PruneUnit { layers, channels })
        .collect();
    units.sort_by_key(|u| u.layers.iter().map(|l| pos[l.0]).min());
    units
}
