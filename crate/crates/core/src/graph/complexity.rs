//! FLOPs and parameter accounting.
//!
//! Convention: a multiply-accumulate counts as two operations, and only
//! convolutions and linear layers (dense and heads) are counted. Pooling,
//! ReLU, affine and residual additions are free.

use super::{infer_shapes, LayerKind, NetworkGraph};
use crate::error::Result;

/// FLOPs contributed by each node for one forward pass of `input_shape`
/// (per whole batch, so pass `N = 1` for per-image counts).
pub fn layer_flops(graph: &NetworkGraph, input_shape: &[usize]) -> Result<Vec<u64>> {
    let shapes = infer_shapes(graph, input_shape)?;
    Ok(graph
        .nodes()
        .iter()
        .map(|n| {
            let out = &shapes[n.id.0];
            match n.kind {
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    ..
                } => {
                    let spatial = (out[0] * out[2] * out[3]) as u64;
                    2 * (kernel * kernel * in_channels * out_channels) as u64 * spatial
                }
                LayerKind::Dense {
                    out_features,
                    in_features,
                }
                | LayerKind::EmbeddingHead {
                    dim: out_features,
                    in_features,
                } => 2 * (in_features * out_features * out[0]) as u64,
                LayerKind::PartHead {
                    parts,
                    part_dim,
                    in_features,
                } => 2 * (in_features * parts * part_dim * out[0]) as u64,
                _ => 0,
            }
        })
        .collect())
}

pub fn count_flops(graph: &NetworkGraph, input_shape: &[usize]) -> Result<u64> {
    Ok(layer_flops(graph, input_shape)?.iter().sum())
}

/// Total number of scalar parameters, biases and affine parameters included.
pub fn count_params(graph: &NetworkGraph) -> u64 {
    graph
        .nodes()
        .iter()
        .flat_map(|n| n.params.iter())
        .map(|p| p.numel() as u64)
        .sum()
}
