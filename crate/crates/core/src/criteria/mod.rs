//! Channel-importance criteria.
//!
//! Every scoring function returns [`ChannelScore`] records where a lower
//! score means "prune first". Scores are accumulated in `f64`. Selection
//! criteria (redundancy clustering, ThiNet, LASSO) return their selections
//! directly and also expose a score view for the pruning strategies.

mod feature;
mod nisp;
mod reconstruction;
mod similarity;

pub use feature::{entropy_of, score_entropy, score_taylor, taylor_raw, LossFn};
pub use nisp::{embedding_variance, score_nisp};
pub use reconstruction::{
    lasso_coordinate_descent, lasso_lambda_max, lasso_select, select_lasso, select_thinet, thinet_contributions,
    thinet_greedy, LassoSelection, ReconstructionSamples,
};
pub use similarity::{
    autobalanced_partition, fpgm_scores, partition_by_magnitude, redundant_clusters, score_fpgm, select_redundant,
    KeepRule, Partition, RedundantSelection,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, NodeId};
use crate::tensor::{Tensor, Trace, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub layer: NodeId,
    pub channel: usize,
    pub score: f64,
}

/// Inputs (and labels) a data-driven criterion is evaluated on.
#[derive(Clone, Debug)]
pub struct ProbeBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl ProbeBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::invalid("probe inputs must be [N, C, H, W]"));
        }
        if labels.len() != inputs.dim(0) {
            return Err(Error::shape("probe", "label count", inputs.dim(0), labels.len()));
        }
        Ok(ProbeBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks batches along the sample axis.
    pub fn concat(batches: &[ProbeBatch]) -> Result<Self> {
        let first = batches.first().ok_or_else(|| Error::invalid("no probe batches to concatenate"))?;
        let tail = first.inputs.shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.inputs.shape()[1..] != tail[..] {
                return Err(Error::invalid("probe batches differ in image shape"));
            }
            data.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(&b.labels);
        }
        let mut shape = vec![labels.len()];
        shape.extend(tail);
        ProbeBatch::new(Tensor::new(shape, data)?, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

/// `sum |w|` (L1) or `sqrt(sum w^2)` (L2) of each output-channel slice.
pub fn channel_norms(weight: &Tensor, norm: Norm) -> Vec<f64> {
    let c = weight.dim(0);
    let per = weight.numel() / c;
    weight
        .data()
        .chunks(per)
        .map(|s| match norm {
            Norm::L1 => s.iter().map(|v| f64::from(v.abs())).sum(),
            Norm::L2 => s.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt(),
        })
        .collect()
}

pub(crate) fn conv_weight(graph: &NetworkGraph, layer: NodeId) -> Result<&Tensor> {
    let node = graph
        .nodes()
        .get(layer.0)
        .ok_or_else(|| Error::invalid(format!("unknown layer {layer}")))?;
    if !node.kind.is_conv() {
        return Err(Error::invalid(format!("layer {} is not a convolution", node.name)));
    }
    Ok(&node.params[0])
}

/// Norm of every output channel of every conv layer.
pub fn score_lp_norm(graph: &NetworkGraph, norm: Norm) -> Vec<ChannelScore> {
    graph
        .conv_ids()
        .into_iter()
        .flat_map(|layer| {
            channel_norms(graph.param(layer, 0), norm)
                .into_iter()
                .enumerate()
                .map(move |(channel, score)| ChannelScore { layer, channel, score })
        })
        .collect()
}

/// Indices sorted by ascending score, ties toward the lower index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Score table as CSV with a global ascending rank (0 = pruned first).
pub fn scores_to_csv(scores: &[ChannelScore]) -> String {
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let order = rank_ascending(&values);
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut out = String::from("layer,channel,score,rank\n");
    for (s, r) in scores.iter().zip(rank) {
        let _ = writeln!(out, "{},{},{:e},{}", s.layer.0, s.channel, s.score, r);
    }
    out
}

/// Traced forward of the probe; returns the trace and every node's output.
pub(crate) fn probe_forward(graph: &NetworkGraph, inputs: &Tensor) -> Result<(Trace, Vec<Var>, crate::graph::ParamVars)> {
    let mut trace = Trace::new();
    let params = graph.bind(&mut trace);
    let x = trace.leaf(inputs.clone());
    let outs = graph.forward(&mut trace, x, &params)?;
    Ok((trace, outs, params))
}
