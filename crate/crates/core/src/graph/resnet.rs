//! Reference architectures: standard ResNet shapes for accounting and the
//! small residual nets used for training experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphBuilder, NetworkGraph, NodeId};
use crate::error::{Error, Result};

fn conv_bn(b: &mut GraphBuilder, name: &str, from: NodeId, out: usize, k: usize, s: usize, relu: bool) -> NodeId {
    let c = b.conv(format!("{name}.conv"), from, out, k, s, k / 2, false);
    let a = b.affine(format!("{name}.bn"), c);
    if relu {
        b.relu(format!("{name}.relu"), a)
    } else {
        a
    }
}

fn shortcut(b: &mut GraphBuilder, name: &str, from: NodeId, out: usize, stride: usize) -> NodeId {
    if stride != 1 || b.channels(from) != out {
        conv_bn(b, &format!("{name}.down"), from, out, 1, stride, false)
    } else {
        from
    }
}

fn basic_block(b: &mut GraphBuilder, name: &str, from: NodeId, width: usize, stride: usize) -> NodeId {
    let h = conv_bn(b, &format!("{name}.a"), from, width, 3, stride, true);
    let h = conv_bn(b, &format!("{name}.b"), h, width, 3, 1, false);
    let skip = shortcut(b, name, from, width, stride);
    let s = b.add(format!("{name}.add"), h, skip);
    b.relu(format!("{name}.out"), s)
}

fn bottleneck(b: &mut GraphBuilder, name: &str, from: NodeId, width: usize, stride: usize) -> NodeId {
    let h = conv_bn(b, &format!("{name}.a"), from, width, 1, 1, true);
    let h = conv_bn(b, &format!("{name}.b"), h, width, 3, stride, true);
    let h = conv_bn(b, &format!("{name}.c"), h, width * 4, 1, 1, false);
    let skip = shortcut(b, name, from, width * 4, stride);
    let s = b.add(format!("{name}.add"), h, skip);
    b.relu(format!("{name}.out"), s)
}

/// Standard ResNet-18/34/50 with the classifier removed; the output is the
/// globally pooled feature (512 or 2048 wide). Weights are random.
///
/// The stem pooling is a 2x2/2 max pool; it yields the same feature-map
/// sizes as the usual padded 3x3/2 pool and pooling carries no FLOPs here.
pub fn build_resnet_shape(variant: u32) -> Result<NetworkGraph> {
    let (blocks, bottle) = match variant {
        18 => ([2, 2, 2, 2], false),
        34 => ([3, 4, 6, 3], false),
        50 => ([3, 4, 6, 3], true),
        v => return Err(Error::invalid(format!("unknown ResNet variant {v} (expected 18, 34 or 50)"))),
    };
    let mut b = GraphBuilder::new();
    let x = b.input("input", 3);
    let stem = conv_bn(&mut b, "stem", x, 64, 7, 2, true);
    let mut h = b.max_pool("stem.pool", stem, 2, 2);
    for (stage, &n) in blocks.iter().enumerate() {
        let width = 64 << stage;
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{}.{}", stage + 1, i);
            h = if bottle {
                bottleneck(&mut b, &name, h, width, stride)
            } else {
                basic_block(&mut b, &name, h, width, stride)
            };
        }
    }
    b.global_avg_pool("pool", h);
    b.build(&mut ChaCha8Rng::seed_from_u64(u64::from(variant)))
}

/// Residual toy network: a stem conv, `blocks` basic blocks at `widths[0]`,
/// then `blocks` basic blocks at `widths[1]` (the first strided, with a
/// projection shortcut), global pooling and an embedding head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyNetSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; 2],
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_embedding")]
    pub embedding_dim: usize,
}

fn default_in_channels() -> usize {
    3
}
fn default_widths() -> [usize; 2] {
    [24, 48]
}
fn default_blocks() -> usize {
    1
}
fn default_embedding() -> usize {
    64
}

impl Default for ToyNetSpec {
    fn default() -> Self {
        ToyNetSpec {
            in_channels: default_in_channels(),
            widths: default_widths(),
            blocks: default_blocks(),
            embedding_dim: default_embedding(),
        }
    }
}

pub fn build_toy_resnet<R: Rng + ?Sized>(spec: &ToyNetSpec, rng: &mut R) -> Result<NetworkGraph> {
    if spec.blocks == 0 || spec.widths.contains(&0) || spec.embedding_dim == 0 || spec.in_channels == 0 {
        return Err(Error::Config(format!("degenerate toy net spec {spec:?}")));
    }
    let mut b = GraphBuilder::new();
    let x = b.input("input", spec.in_channels);
    let mut h = conv_bn(&mut b, "stem", x, spec.widths[0], 3, 1, true);
    for (stage, &width) in spec.widths.iter().enumerate() {
        for i in 0..spec.blocks {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            h = basic_block(&mut b, &format!("stage{}.{}", stage + 1, i), h, width, stride);
        }
    }
    let p = b.global_avg_pool("pool", h);
    b.embedding("embedding", p, spec.embedding_dim);
    b.build(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{count_params, infer_shapes};

    #[test]
    fn toy_net_has_six_convs() {
        let g = build_toy_resnet(&ToyNetSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.conv_ids().len(), 6);
        let p = count_params(&g);
        assert!((40_000..60_000).contains(&p), "{p}");
        let s = infer_shapes(&g, &[2, 3, 16, 8]).unwrap();
        assert_eq!(s[g.output().0], vec![2, 64]);
    }

    #[test]
    fn unknown_variant() {
        assert!(build_resnet_shape(101).is_err());
    }
}
