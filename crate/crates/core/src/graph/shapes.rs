use super::{LayerKind, NetworkGraph};
use crate::error::{Error, Result};
use crate::tensor::conv_output_len;

/// Output shape of every node for an `[N, C, H, W]` input, indexed by node id.
pub fn infer_shapes(graph: &NetworkGraph, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    if input_shape.len() != 4 || input_shape.contains(&0) {
        return Err(Error::invalid(format!(
            "input shape must be [N, C, H, W] with positive sizes, got {input_shape:?}"
        )));
    }
    let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes().len()];
    for &id in graph.topo_order() {
        let n = graph.node(id);
        let fail = |reason: String| Error::InvalidGraph {
            node: n.name.clone(),
            reason,
        };
        let inp = n.inputs.first().map(|i| shapes[i.0].clone()).unwrap_or_default();
        let shape = match n.kind {
            LayerKind::Input { channels } => {
                if input_shape[1] != channels {
                    return Err(fail(format!("input has {} channels, expected {channels}", input_shape[1])));
                }
                input_shape.to_vec()
            }
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let h = conv_output_len(inp[2], kernel, stride, pad)
                    .ok_or_else(|| fail(format!("kernel {kernel} larger than padded height {}", inp[2] + 2 * pad)))?;
                let w = conv_output_len(inp[3], kernel, stride, pad)
                    .ok_or_else(|| fail(format!("kernel {kernel} larger than padded width {}", inp[3] + 2 * pad)))?;
                vec![inp[0], out_channels, h, w]
            }
            LayerKind::AvgPool { kernel, stride } | LayerKind::MaxPool { kernel, stride } => {
                let h = conv_output_len(inp[2], kernel, stride, 0)
                    .ok_or_else(|| fail(format!("pool window {kernel} larger than height {}", inp[2])))?;
                let w = conv_output_len(inp[3], kernel, stride, 0)
                    .ok_or_else(|| fail(format!("pool window {kernel} larger than width {}", inp[3])))?;
                vec![inp[0], inp[1], h, w]
            }
            LayerKind::GlobalAvgPool => vec![inp[0], inp[1]],
            LayerKind::Dense { out_features, .. } => vec![inp[0], out_features],
            LayerKind::EmbeddingHead { dim, .. } => vec![inp[0], dim],
            LayerKind::PartHead { parts, part_dim, .. } => vec![inp[0], parts * part_dim],
            LayerKind::Relu | LayerKind::ChannelAffine { .. } => inp,
            LayerKind::Add => {
                let other = &shapes[n.inputs[1].0];
                if *other != inp {
                    return Err(fail(format!("add operands have shapes {inp:?} and {other:?}")));
                }
                inp
            }
        };
        shapes[id.0] = shape;
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padding_preserves_and_stride_halves() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c1 = b.conv("c1", x, 4, 3, 1, 1, false);
        let c2 = b.conv("c2", c1, 8, 3, 2, 1, false);
        let g = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = infer_shapes(&g, &[1, 3, 8, 8]).unwrap();
        assert_eq!(s[c1.0], vec![1, 4, 8, 8]);
        assert_eq!(s[c2.0], vec![1, 8, 4, 4]);
    }

    #[test]
    fn oversized_kernel_names_node() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 1);
        b.conv("big", x, 2, 7, 1, 0, false);
        let g = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = infer_shapes(&g, &[1, 1, 4, 4]).unwrap_err();
        assert!(err.to_string().contains("big"));
    }
}
