//! Declarative architecture files.
//!
//! ```toml
//! version = 1
//! input_channels = 3
//!
//! [[layer]]
//! name = "c1"
//! kind = "conv"        # conv | dense | affine | relu | avg_pool | max_pool
//! out = 16             # | global_avg_pool | add | embedding | part_head
//! kernel = 3
//! stride = 1
//! pad = 1
//!
//! [[layer]]
//! name = "sum"
//! kind = "add"
//! inputs = ["c1", "skip"]
//! ```
//! `inputs` defaults to the previous layer (or the input for the first one).
//! The builtin names `resnet18`, `resnet34` and `resnet50` are also accepted
//! wherever an architecture is expected.

use std::collections::HashMap;

use rand::Rng;
use serde::Deserialize;

use super::{GraphBuilder, NetworkGraph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "one")]
    pub version: u32,
    pub input_channels: usize,
    #[serde(rename = "layer", default)]
    pub layers: Vec<LayerDecl>,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDecl {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub out: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    #[serde(default)]
    pub bias: bool,
    pub parts: Option<usize>,
    pub part_dim: Option<usize>,
}

pub fn parse_arch(text: &str) -> Result<ArchConfig> {
    let cfg: ArchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.version != 1 {
        return Err(Error::Config(format!("unsupported architecture version {}", cfg.version)));
    }
    Ok(cfg)
}

impl ArchConfig {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<NetworkGraph> {
        let mut b = GraphBuilder::new();
        let mut ids: HashMap<String, NodeId> = HashMap::new();
        let input = b.input("input", self.input_channels);
        ids.insert("input".into(), input);
        let mut prev = input;
        for l in &self.layers {
            let bad = |what: &str| Error::Config(format!("layer {}: {what}", l.name));
            if ids.contains_key(&l.name) {
                return Err(bad("duplicate name"));
            }
            let inputs: Vec<NodeId> = if l.inputs.is_empty() {
                vec![prev]
            } else {
                l.inputs
                    .iter()
                    .map(|n| ids.get(n).copied().ok_or_else(|| bad(&format!("unknown input {n}"))))
                    .collect::<Result<_>>()?
            };
            let arity = if l.kind == "add" { 2 } else { 1 };
            if inputs.len() != arity {
                return Err(bad(&format!("expects {arity} inputs, got {}", inputs.len())));
            }
            let from = inputs[0];
            let need = |v: Option<usize>, what: &str| v.ok_or_else(|| bad(&format!("missing `{what}`")));
            let name = l.name.clone();
            let id = match l.kind.as_str() {
                "conv" => {
                    let k = need(l.kernel, "kernel")?;
                    b.conv(name, from, need(l.out, "out")?, k, l.stride.unwrap_or(1), l.pad.unwrap_or(k / 2), l.bias)
                }
                "dense" => b.dense(name, from, need(l.out, "out")?),
                "affine" => b.affine(name, from),
                "relu" => b.relu(name, from),
                "avg_pool" | "max_pool" => {
                    let k = need(l.kernel, "kernel")?;
                    let s = l.stride.unwrap_or(k);
                    if l.kind == "avg_pool" {
                        b.avg_pool(name, from, k, s)
                    } else {
                        b.max_pool(name, from, k, s)
                    }
                }
                "global_avg_pool" => b.global_avg_pool(name, from),
                "add" => b.add(name, from, inputs[1]),
                "embedding" => b.embedding(name, from, need(l.out, "out")?),
                "part_head" => b.part_head(name, from, need(l.parts, "parts")?, need(l.part_dim, "part_dim")?),
                other => return Err(bad(&format!("unknown kind `{other}`"))),
            };
            ids.insert(l.name.clone(), id);
            prev = id;
        }
        b.build(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::count_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builds_residual_block() {
        let cfg = parse_arch(
            r#"
input_channels = 3
[[layer]]
name = "stem"
kind = "conv"
out = 4
kernel = 3
[[layer]]
name = "a"
kind = "conv"
out = 4
kernel = 3
bias = true
[[layer]]
name = "sum"
kind = "add"
inputs = ["a", "stem"]
[[layer]]
name = "gap"
kind = "global_avg_pool"
"#,
        )
        .unwrap();
        let g = cfg.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(count_params(&g), 3 * 4 * 9 + 4 * 4 * 9 + 4);
    }

    #[test]
    fn unknown_kind_is_reported() {
        let cfg = parse_arch("input_channels = 1\n[[layer]]\nname = \"x1\"\nkind = \"lstm\"\n").unwrap();
        let err = cfg.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("lstm"));
    }
}
