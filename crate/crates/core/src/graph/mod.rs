//! Network representation and the structural rewrites used for pruning.
//!
//! A [`NetworkGraph`] is a DAG of [`LayerNode`]s. Node ids are positions in
//! the node table; edges are stored as each node's input list. Graphs are
//! immutable values: pruning returns a new graph.

mod arch;
mod complexity;
mod coupling;
mod prune;
mod resnet;
mod serialize;
mod shapes;

pub use arch::{parse_arch, ArchConfig, LayerDecl};
pub use complexity::{count_flops, count_params, layer_flops};
pub use coupling::{coupled_channel_groups, prune_units, ChannelGroup, PruneUnit};
pub use prune::{hard_prune, materialize, soft_prune_apply, PruneMask};
pub use resnet::{build_resnet_shape, build_toy_resnet, ToyNetSpec};
pub use serialize::{deserialize, serialize, FORMAT_VERSION};
pub use shapes::infer_shapes;

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Trace, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Dense {
        out_features: usize,
        in_features: usize,
    },
    /// Per-channel scale and shift; stands in for batch normalization.
    ChannelAffine {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    /// Linear projection of pooled features to a fixed embedding size.
    EmbeddingHead {
        dim: usize,
        in_features: usize,
    },
    /// Linear projection to `parts` contiguous chunks of `part_dim` features.
    PartHead {
        parts: usize,
        part_dim: usize,
        in_features: usize,
    },
}

impl LayerKind {
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Shapes of the parameter tensors this kind owns.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerKind::Dense {
                out_features,
                in_features,
            }
            | LayerKind::EmbeddingHead {
                dim: out_features,
                in_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            LayerKind::PartHead {
                parts,
                part_dim,
                in_features,
            } => vec![vec![parts * part_dim, in_features], vec![parts * part_dim]],
            LayerKind::ChannelAffine { channels } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    /// Layers that map each input channel to the same output channel.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu
                | LayerKind::ChannelAffine { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::MaxPool { .. }
                | LayerKind::GlobalAvgPool
        )
    }

    /// Layers whose weight matrix consumes input features/channels.
    pub fn is_linear_consumer(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. } | LayerKind::EmbeddingHead { .. } | LayerKind::PartHead { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ChannelAffine { .. } => "channel_affine",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Add => "add",
            LayerKind::EmbeddingHead { .. } => "embedding_head",
            LayerKind::PartHead { .. } => "part_head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<Tensor>,
}

/// Trace handles of every parameter tensor, indexed `[node][param]`.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Vec<Var>>);

impl ParamVars {
    pub fn get(&self, node: NodeId) -> &[Var] {
        &self.0[node.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    nodes: Vec<LayerNode>,
    order: Vec<NodeId>,
    consumers: Vec<Vec<NodeId>>,
    output: NodeId,
}

impl NetworkGraph {
    /// Validates `nodes` and builds the topological order cache.
    pub fn new(nodes: Vec<LayerNode>) -> Result<Self> {
        let err = |n: &LayerNode, reason: String| Error::InvalidGraph {
            node: n.name.clone(),
            reason,
        };
        let mut names = HashSet::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.id.0 != i {
                return Err(err(n, format!("id {} does not match position {i}", n.id.0)));
            }
            if !names.insert(n.name.as_str()) {
                return Err(err(n, "duplicate layer name".into()));
            }
            if n.inputs.len() != n.kind.arity() {
                return Err(err(
                    n,
                    format!("{} expects {} inputs, has {}", n.kind.name(), n.kind.arity(), n.inputs.len()),
                ));
            }
            if let Some(bad) = n.inputs.iter().find(|x| x.0 >= nodes.len()) {
                return Err(err(n, format!("unknown input {bad}")));
            }
            let shapes = n.kind.param_shapes();
            if shapes.len() != n.params.len() {
                return Err(err(n, format!("expected {} parameter tensors, has {}", shapes.len(), n.params.len())));
            }
            for (s, p) in shapes.iter().zip(&n.params) {
                if p.shape() != s.as_slice() {
                    return Err(err(n, format!("parameter shape {:?} does not match declared {:?}", p.shape(), s)));
                }
            }
        }
        let inputs: Vec<_> = nodes.iter().filter(|n| matches!(n.kind, LayerKind::Input { .. })).collect();
        if inputs.len() != 1 {
            return Err(Error::InvalidGraph {
                node: "<graph>".into(),
                reason: format!("expected exactly one input node, found {}", inputs.len()),
            });
        }

        let mut consumers = vec![Vec::new(); nodes.len()];
        for n in &nodes {
            for &i in &n.inputs {
                consumers[i.0].push(n.id);
            }
        }
        // Kahn's algorithm; lowest ready id first keeps the order deterministic.
        let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
        let mut ready: std::collections::BTreeSet<usize> =
            (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(NodeId(i));
            for c in &consumers[i] {
                indegree[c.0] -= 1;
                if indegree[c.0] == 0 {
                    ready.insert(c.0);
                }
            }
        }
        if order.len() != nodes.len() {
            return Err(Error::CyclicGraph);
        }
        let sinks: Vec<_> = nodes.iter().filter(|n| consumers[n.id.0].is_empty()).collect();
        if sinks.len() != 1 {
            return Err(Error::InvalidGraph {
                node: "<graph>".into(),
                reason: format!("expected a single output node, found {}", sinks.len()),
            });
        }
        let output = sinks[0].id;
        let graph = NetworkGraph {
            nodes,
            order,
            consumers,
            output,
        };
        graph.check_channels()?;
        Ok(graph)
    }

    fn check_channels(&self) -> Result<()> {
        let mut channels = vec![0usize; self.nodes.len()];
        let mut spatial = vec![false; self.nodes.len()];
        for &id in &self.order {
            let n = &self.nodes[id.0];
            let err = |reason: String| Error::InvalidGraph {
                node: n.name.clone(),
                reason,
            };
            let in_c = n.inputs.first().map(|i| channels[i.0]).unwrap_or(0);
            let in_sp = n.inputs.first().map(|i| spatial[i.0]).unwrap_or(false);
            let need = |expected: usize, what: &str| {
                if expected == in_c {
                    Ok(())
                } else {
                    Err(err(format!("{what} {expected} does not match incoming {in_c} channels")))
                }
            };
            let (c, sp) = match n.kind {
                LayerKind::Input { channels } => (channels, true),
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    ..
                } => {
                    need(in_channels, "in_channels")?;
                    if !in_sp {
                        return Err(err("conv needs a spatial input".into()));
                    }
                    (out_channels, true)
                }
                LayerKind::Dense {
                    out_features,
                    in_features,
                }
                | LayerKind::EmbeddingHead {
                    dim: out_features,
                    in_features,
                } => {
                    need(in_features, "in_features")?;
                    if in_sp {
                        return Err(err("linear layer needs a pooled (rank-2) input".into()));
                    }
                    (out_features, false)
                }
                LayerKind::PartHead {
                    parts,
                    part_dim,
                    in_features,
                } => {
                    need(in_features, "in_features")?;
                    if in_sp {
                        return Err(err("linear layer needs a pooled (rank-2) input".into()));
                    }
                    (parts * part_dim, false)
                }
                LayerKind::ChannelAffine { channels } => {
                    need(channels, "channels")?;
                    (channels, in_sp)
                }
                LayerKind::Relu => (in_c, in_sp),
                LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => {
                    if !in_sp {
                        return Err(err("pooling needs a spatial input".into()));
                    }
                    (in_c, true)
                }
                LayerKind::GlobalAvgPool => {
                    if !in_sp {
                        return Err(err("global pooling needs a spatial input".into()));
                    }
                    (in_c, false)
                }
                LayerKind::Add => {
                    let (a, b) = (n.inputs[0], n.inputs[1]);
                    if channels[a.0] != channels[b.0] {
                        return Err(err(format!(
                            "add operands have {} and {} channels",
                            channels[a.0], channels[b.0]
                        )));
                    }
                    if spatial[a.0] != spatial[b.0] {
                        return Err(err("add operands differ in rank".into()));
                    }
                    (in_c, in_sp)
                }
            };
            channels[id.0] = c;
            spatial[id.0] = sp;
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn topo_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id.0]
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, LayerKind::Input { .. }))
            .map(|n| n.id)
            .expect("validated graph has an input")
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    /// Output channel (or feature) count of every node.
    pub fn channel_counts(&self) -> Vec<usize> {
        let mut channels = vec![0usize; self.nodes.len()];
        for &id in &self.order {
            let n = &self.nodes[id.0];
            channels[id.0] = match n.kind {
                LayerKind::Input { channels } => channels,
                LayerKind::Conv { out_channels, .. } => out_channels,
                LayerKind::Dense { out_features, .. } => out_features,
                LayerKind::EmbeddingHead { dim, .. } => dim,
                LayerKind::PartHead { parts, part_dim, .. } => parts * part_dim,
                LayerKind::ChannelAffine { channels } => channels,
                _ => channels[n.inputs[0].0],
            };
        }
        channels
    }

    pub fn conv_ids(&self) -> Vec<NodeId> {
        self.order.iter().copied().filter(|&id| self.nodes[id.0].kind.is_conv()).collect()
    }

    pub fn out_channels(&self, conv: NodeId) -> Option<usize> {
        match self.nodes[conv.0].kind {
            LayerKind::Conv { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Node whose output is the activation of `conv`: follows single-consumer
    /// affine/ReLU layers directly after the convolution.
    pub fn feature_map_node(&self, conv: NodeId) -> NodeId {
        let mut cur = conv;
        loop {
            let cons = &self.consumers[cur.0];
            if cons.len() != 1 {
                return cur;
            }
            let next = cons[0];
            match self.nodes[next.0].kind {
                LayerKind::ChannelAffine { .. } | LayerKind::Relu => cur = next,
                _ => return cur,
            }
        }
    }

    pub fn param_count_tensors(&self) -> usize {
        self.nodes.iter().map(|n| n.params.len()).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (NodeId, usize, &mut Tensor)> {
        self.nodes
            .iter_mut()
            .flat_map(|n| {
                let id = n.id;
                n.params.iter_mut().enumerate().map(move |(i, p)| (id, i, p))
            })
    }

    pub fn param(&self, node: NodeId, index: usize) -> &Tensor {
        &self.nodes[node.0].params[index]
    }

    pub fn param_mut(&mut self, node: NodeId, index: usize) -> &mut Tensor {
        &mut self.nodes[node.0].params[index]
    }

    /// Registers every parameter as a trace leaf.
    pub fn bind(&self, trace: &mut Trace) -> ParamVars {
        ParamVars(
            self.nodes
                .iter()
                .map(|n| n.params.iter().map(|p| trace.leaf(p.clone())).collect())
                .collect(),
        )
    }

    /// Traced forward pass; returns the output handle of every node.
    pub fn forward(&self, trace: &mut Trace, input: Var, params: &ParamVars) -> Result<Vec<Var>> {
        let mut out: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for &id in &self.order {
            let n = &self.nodes[id.0];
            let x = |k: usize| out[n.inputs[k].0].expect("inputs precede in topological order");
            let p = params.get(id);
            let v = match n.kind {
                LayerKind::Input { channels } => {
                    let shape = trace.value(input).shape();
                    if shape.len() != 4 || shape[1] != channels {
                        return Err(Error::shape(
                            "forward",
                            format!("input channels of {}", n.name),
                            channels,
                            shape.get(1).copied().unwrap_or(0),
                        ));
                    }
                    input
                }
                LayerKind::Conv { stride, pad, bias, .. } => {
                    trace.conv2d(x(0), p[0], if bias { Some(p[1]) } else { None }, stride, pad)?
                }
                LayerKind::Dense { .. } | LayerKind::EmbeddingHead { .. } | LayerKind::PartHead { .. } => {
                    trace.dense(x(0), p[0], Some(p[1]))?
                }
                LayerKind::ChannelAffine { .. } => trace.channel_affine(x(0), p[0], p[1])?,
                LayerKind::Relu => trace.relu(x(0)),
                LayerKind::AvgPool { kernel, stride } => trace.avg_pool(x(0), kernel, stride)?,
                LayerKind::MaxPool { kernel, stride } => trace.max_pool(x(0), kernel, stride)?,
                LayerKind::GlobalAvgPool => trace.global_avg_pool(x(0))?,
                LayerKind::Add => trace.add(x(0), x(1))?,
            };
            out[id.0] = Some(v);
        }
        Ok(out.into_iter().map(|v| v.expect("every node visited")).collect())
    }

    /// Untraced inference: output of the sink node.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut trace = Trace::new();
        let params = self.bind(&mut trace);
        let x = trace.leaf(input.clone());
        let outs = self.forward(&mut trace, x, &params)?;
        Ok(trace.value(outs[self.output.0]).clone())
    }

    /// Copies trace gradients into the parameter tensors; parameters that
    /// did not influence the loss receive zero gradients.
    pub fn store_grads(&mut self, trace: &Trace, params: &ParamVars) {
        for n in &mut self.nodes {
            for (p, v) in n.params.iter_mut().zip(params.get(n.id)) {
                let g = trace.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
                p.set_grad(g).expect("gradient length matches parameter");
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, _, p) in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Signature of all parameter shapes; changes whenever the structure does.
    pub fn structure_signature(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter().map(|p| p.shape().to_vec()))
            .collect()
    }
}

/// Incremental graph construction with channel bookkeeping.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<(String, LayerKind, Vec<NodeId>)>,
    channels: Vec<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.channels[id.0]
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push((name.into(), kind, inputs));
        self.channels.push(channels);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>, channels: usize) -> NodeId {
        self.push(name, LayerKind::Input { channels }, vec![], channels)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        from: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> NodeId {
        let kind = LayerKind::Conv {
            out_channels,
            in_channels: self.channels[from.0],
            kernel,
            stride,
            pad,
            bias,
        };
        self.push(name, kind, vec![from], out_channels)
    }

    pub fn dense(&mut self, name: impl Into<String>, from: NodeId, out_features: usize) -> NodeId {
        let kind = LayerKind::Dense {
            out_features,
            in_features: self.channels[from.0],
        };
        self.push(name, kind, vec![from], out_features)
    }

    pub fn affine(&mut self, name: impl Into<String>, from: NodeId) -> NodeId {
        let c = self.channels[from.0];
        self.push(name, LayerKind::ChannelAffine { channels: c }, vec![from], c)
    }

    pub fn relu(&mut self, name: impl Into<String>, from: NodeId) -> NodeId {
        let c = self.channels[from.0];
        self.push(name, LayerKind::Relu, vec![from], c)
    }

    pub fn avg_pool(&mut self, name: impl Into<String>, from: NodeId, kernel: usize, stride: usize) -> NodeId {
        let c = self.channels[from.0];
        self.push(name, LayerKind::AvgPool { kernel, stride }, vec![from], c)
    }

    pub fn max_pool(&mut self, name: impl Into<String>, from: NodeId, kernel: usize, stride: usize) -> NodeId {
        let c = self.channels[from.0];
        self.push(name, LayerKind::MaxPool { kernel, stride }, vec![from], c)
    }

    pub fn global_avg_pool(&mut self, name: impl Into<String>, from: NodeId) -> NodeId {
        let c = self.channels[from.0];
        self.push(name, LayerKind::GlobalAvgPool, vec![from], c)
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels[a.0];
        self.push(name, LayerKind::Add, vec![a, b], c)
    }

    pub fn embedding(&mut self, name: impl Into<String>, from: NodeId, dim: usize) -> NodeId {
        let kind = LayerKind::EmbeddingHead {
            dim,
            in_features: self.channels[from.0],
        };
        self.push(name, kind, vec![from], dim)
    }

    pub fn part_head(&mut self, name: impl Into<String>, from: NodeId, parts: usize, part_dim: usize) -> NodeId {
        let kind = LayerKind::PartHead {
            parts,
            part_dim,
            in_features: self.channels[from.0],
        };
        self.push(name, kind, vec![from], parts * part_dim)
    }

    /// Allocates parameters (fan-in scaled normal weights, zero biases,
    /// unit affine scales) in node order and validates the result.
    pub fn build<R: Rng + ?Sized>(self, rng: &mut R) -> Result<NetworkGraph> {
        let nodes = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind, inputs))| {
                let params = init_params(&kind, rng);
                LayerNode {
                    id: NodeId(i),
                    name,
                    kind,
                    inputs,
                    params,
                }
            })
            .collect();
        NetworkGraph::new(nodes)
    }
}

pub(crate) fn init_params<R: Rng + ?Sized>(kind: &LayerKind, rng: &mut R) -> Vec<Tensor> {
    match *kind {
        LayerKind::Conv {
            out_channels,
            in_channels,
            kernel,
            bias,
            ..
        } => {
            let mut v = vec![Tensor::kaiming(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                rng,
            )];
            if bias {
                v.push(Tensor::zeros(&[out_channels]));
            }
            v
        }
        LayerKind::ChannelAffine { channels } => {
            vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])]
        }
        ref k if k.is_linear_consumer() => {
            let shapes = k.param_shapes();
            let (out, inp) = (shapes[0][0], shapes[0][1]);
            vec![Tensor::kaiming(&[out, inp], inp, rng), Tensor::zeros(&[out])]
        }
        _ => Vec::new(),
    }
}

/// Lookup of node ids by name, for tests and configs.
pub fn name_index(graph: &NetworkGraph) -> HashMap<String, NodeId> {
    graph.nodes().iter().map(|n| (n.name.clone(), n.id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_add_channel_mismatch() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let a = b.conv("a", x, 4, 3, 1, 1, false);
        let c = b.conv("c", x, 5, 3, 1, 1, false);
        b.add("sum", a, c);
        let err = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("sum"), "{err}");
    }

    #[test]
    fn rejects_cycles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        let r1 = b.relu("r1", x);
        b.relu("r2", r1);
        let g = b.build(&mut rng).unwrap();
        let mut nodes = g.nodes().to_vec();
        nodes[1].inputs = vec![NodeId(2)];
        assert!(matches!(NetworkGraph::new(nodes), Err(Error::CyclicGraph)));
    }

    #[test]
    fn feature_map_follows_affine_relu() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c = b.conv("c", x, 4, 3, 1, 1, false);
        let a = b.affine("bn", c);
        let r = b.relu("r", a);
        b.global_avg_pool("gap", r);
        let g = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.feature_map_node(c), r);
    }
}
