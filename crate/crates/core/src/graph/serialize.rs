//! Model file format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CPRN"
//! 4       4     format version (u32 LE)
//! 8       4     header length H (u32 LE)
//! 12      H     JSON header: node table (name, kind, inputs, parameter shapes)
//! 12+H    4*P   parameter payload, f32 LE, in node then parameter order
//! end-4   4     CRC-32 of every preceding byte (u32 LE)
//! ```
//! The checksum is verified before anything else is parsed.

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerNode, NetworkGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CPRN";

#[derive(Serialize, Deserialize)]
struct NodeHeader {
    name: String,
    #[serde(flatten)]
    kind: LayerKind,
    inputs: Vec<usize>,
    params: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    nodes: Vec<NodeHeader>,
}

pub fn serialize(graph: &NetworkGraph) -> Vec<u8> {
    let header = Header {
        nodes: graph
            .nodes()
            .iter()
            .map(|n| NodeHeader {
                name: n.name.clone(),
                kind: n.kind.clone(),
                inputs: n.inputs.iter().map(|i| i.0).collect(),
                params: n.params.iter().map(|p| p.shape().to_vec()).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * crate::graph::count_params(graph) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in graph.nodes().iter().flat_map(|n| &n.params) {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn deserialize(bytes: &[u8]) -> Result<NetworkGraph> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("file is only {} bytes", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32_at(body, 4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let hlen = u32_at(body, 8) as usize;
    let hend = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&body[12..hend]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut payload = body[hend..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    if (body.len() - hend) % 4 != 0 {
        return Err(Error::Format("payload is not a whole number of f32 values".into()));
    }
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for (i, h) in header.nodes.into_iter().enumerate() {
        let mut params = Vec::with_capacity(h.params.len());
        for shape in h.params {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = payload.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Format("payload shorter than declared parameters".into()));
            }
            params.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        nodes.push(LayerNode {
            id: NodeId(i),
            name: h.name,
            kind: h.kind,
            inputs: h.inputs.into_iter().map(NodeId).collect(),
            params,
        });
    }
    if payload.next().is_some() {
        return Err(Error::Format("trailing payload after last parameter".into()));
    }
    NetworkGraph::new(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_toy_resnet, ToyNetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> NetworkGraph {
        build_toy_resnet(&ToyNetSpec::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = toy();
        let back = deserialize(&serialize(&g)).unwrap();
        assert_eq!(back, g);
        for (a, b) in g.nodes().iter().zip(back.nodes()) {
            for (p, q) in a.params.iter().zip(&b.params) {
                let pb: Vec<u32> = p.data().iter().map(|v| v.to_bits()).collect();
                let qb: Vec<u32> = q.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(pb, qb);
            }
        }
    }

    #[test]
    fn truncation_fails_checksum() {
        let bytes = serialize(&toy());
        let cut = &bytes[..bytes.len() - 37];
        assert!(matches!(deserialize(cut), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = serialize(&toy());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize(&bytes), Err(Error::VersionMismatch { found: 7, .. })));
    }
}
