//! Feature-map criteria: activation entropy and the first-order Taylor term.

use super::{probe_forward, ChannelScore, ProbeBatch};
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, NodeId};
use crate::tensor::{Trace, Var};

/// Scalar training loss built on top of the network output (embeddings)
/// for a batch with the given labels.
pub type LossFn<'a> = dyn Fn(&mut Trace, Var, &[usize]) -> Result<Var> + 'a;

/// Shannon entropy (natural log) of `values` histogrammed into `bins`
/// equal-width bins over `[min, max]`. A constant input has entropy 0.
pub fn entropy_of(values: &[f64], bins: usize) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() || hi <= lo || bins == 0 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn pooled_activations(graph: &NetworkGraph, layer: NodeId, probe: &ProbeBatch) -> Result<Vec<Vec<f64>>> {
    let (trace, outs, _) = probe_forward(graph, &probe.inputs)?;
    let h = trace.value(outs[graph.feature_map_node(layer).0]);
    let (n, c) = (h.dim(0), h.dim(1));
    let hw = h.numel() / (n * c);
    let mut per_channel = vec![Vec::with_capacity(n); c];
    for (i, plane) in h.data().chunks(hw).enumerate() {
        let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64;
        per_channel[i % c].push(mean);
    }
    Ok(per_channel)
}

/// Entropy of each channel's globally pooled activation over the probe.
pub fn score_entropy(graph: &NetworkGraph, layer: NodeId, probe: &ProbeBatch, bins: usize) -> Result<Vec<ChannelScore>> {
    super::conv_weight(graph, layer)?;
    if probe.len() < 2 {
        return Err(Error::invalid("entropy needs at least two probe samples"));
    }
    if bins == 0 {
        return Err(Error::invalid("entropy needs at least one bin"));
    }
    Ok(pooled_activations(graph, layer, probe)?
        .iter()
        .enumerate()
        .map(|(channel, v)| ChannelScore {
            layer,
            channel,
            score: entropy_of(v, bins),
        })
        .collect())
}

/// Mean over samples and positions of `|dC/dH * H|` for every conv
/// channel, where `H` is the activation after the conv's affine/ReLU.
pub fn taylor_raw(graph: &NetworkGraph, loss: &LossFn<'_>, probe: &ProbeBatch) -> Result<Vec<ChannelScore>> {
    let (mut trace, outs, _) = probe_forward(graph, &probe.inputs)?;
    let l = loss(&mut trace, outs[graph.output().0], &probe.labels)?;
    trace.backward(l)?;
    let mut scores = Vec::new();
    for layer in graph.conv_ids() {
        let v = outs[graph.feature_map_node(layer).0];
        let h = trace.value(v);
        let (n, c) = (h.dim(0), h.dim(1));
        let hw = h.numel() / (n * c);
        let mut acc = vec![0.0f64; c];
        if let Some(g) = trace.grad(v) {
            for (i, (hp, gp)) in h.data().chunks(hw).zip(g.chunks(hw)).enumerate() {
                acc[i % c] += hp.iter().zip(gp).map(|(&a, &b)| (f64::from(a) * f64::from(b)).abs()).sum::<f64>();
            }
        }
        let denom = (n * hw) as f64;
        scores.extend(acc.into_iter().enumerate().map(|(channel, s)| ChannelScore {
            layer,
            channel,
            score: s / denom,
        }));
    }
    Ok(scores)
}

/// Taylor scores, l2-normalized within each layer so they compare across
/// layers. All-zero layers stay zero.
pub fn score_taylor(graph: &NetworkGraph, loss: &LossFn<'_>, probe: &ProbeBatch) -> Result<Vec<ChannelScore>> {
    let mut scores = taylor_raw(graph, loss, probe)?;
    let mut start = 0;
    while start < scores.len() {
        let layer = scores[start].layer;
        let end = start + scores[start..].iter().take_while(|s| s.layer == layer).count();
        let norm = scores[start..end].iter().map(|s| s.score * s.score).sum::<f64>().sqrt();
        if norm > 0.0 {
            for s in &mut scores[start..end] {
                s.score /= norm;
            }
        }
        start = end;
    }
    Ok(scores)
}
