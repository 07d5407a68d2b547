//! Importance propagation from the network output back to every channel.

use super::{ChannelScore, ProbeBatch};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph};

/// Propagates `final_importance` (one value per output feature) backwards:
/// linear and conv layers distribute `|W|`-weighted sums (conv kernels
/// summed over space), every other layer passes scores through unchanged,
/// and a node feeding several consumers sums what it receives.
pub fn score_nisp(graph: &NetworkGraph, final_importance: &[f64]) -> Result<Vec<ChannelScore>> {
    let channels = graph.channel_counts();
    let sink = graph.output();
    if final_importance.len() != channels[sink.0] {
        return Err(Error::shape(
            "score_nisp",
            "final importance length",
            channels[sink.0],
            final_importance.len(),
        ));
    }
    if final_importance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("final importance must be finite and non-negative"));
    }
    let mut s: Vec<Vec<f64>> = channels.iter().map(|&c| vec![0.0; c]).collect();
    s[sink.0] = final_importance.to_vec();
    for &id in graph.topo_order().iter().rev() {
        let n = graph.node(id);
        let out = s[id.0].clone();
        match n.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv { .. }
            | LayerKind::Dense { .. }
            | LayerKind::EmbeddingHead { .. }
            | LayerKind::PartHead { .. } => {
                let w = &n.params[0];
                let (o, i) = (w.dim(0), w.dim(1));
                let area = w.numel() / (o * i);
                let target = &mut s[n.inputs[0].0];
                for (oo, so) in out.iter().enumerate().take(o) {
                    for (ii, t) in target.iter_mut().enumerate().take(i) {
                        let base = (oo * i + ii) * area;
                        let a: f64 = w.data()[base..base + area].iter().map(|v| f64::from(v.abs())).sum();
                        *t += a * so;
                    }
                }
            }
            _ => {
                for inp in &n.inputs {
                    for (t, v) in s[inp.0].iter_mut().zip(&out) {
                        *t += v;
                    }
                }
            }
        }
    }
    Ok(graph
        .conv_ids()
        .into_iter()
        .flat_map(|layer| {
            s[layer.0]
                .iter()
                .enumerate()
                .map(move |(channel, &score)| ChannelScore { layer, channel, score })
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Per-feature variance of the network output over the probe.
pub fn embedding_variance(graph: &NetworkGraph, probe: &ProbeBatch) -> Result<Vec<f64>> {
    let out = graph.predict(&probe.inputs)?;
    if out.rank() != 2 {
        return Err(Error::invalid("network output is not a feature matrix"));
    }
    let (n, d) = (out.dim(0), out.dim(1));
    let rows: Vec<&[f32]> = out.data().chunks(d).collect();
    Ok((0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / n as f64;
            rows.iter().map(|r| (f64::from(r[j]) - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect())
}
