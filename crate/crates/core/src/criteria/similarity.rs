//! Weight-space criteria: cosine redundancy clustering, geometric-median
//! distance (FPGM) and the magnitude partition used by Auto-Balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{channel_norms, conv_weight, rank_ascending, ChannelScore, Norm};
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, NodeId};
use crate::tensor::Tensor;

fn slices(weight: &Tensor) -> Vec<Vec<f64>> {
    let per = weight.numel() / weight.dim(0);
    weight
        .data()
        .chunks(per)
        .map(|s| s.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Cosine similarity; two zero vectors count as identical, a zero vector
/// and a non-zero one as orthogonal.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KeepRule {
    #[default]
    LowestIndex,
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RedundantSelection {
    pub clusters: Vec<Vec<usize>>,
    pub keep: Vec<usize>,
    pub prune: Vec<usize>,
}

/// Greedy agglomerative clustering: repeatedly merge the pair of clusters
/// with the highest mean cross-cluster cosine similarity while it exceeds
/// `tau`. Cross pairs only, so singletons never compare with themselves.
pub fn redundant_clusters(weight: &Tensor, tau: f64) -> Vec<Vec<usize>> {
    let w = slices(weight);
    let n = w.len();
    let sim: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cosine(&w[i], &w[j])).collect()).collect();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let total: f64 = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                    .map(|(i, j)| sim[i][j])
                    .sum();
                let mean = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(m, _, _)| mean > m) {
                    best = Some((mean, a, b));
                }
            }
        }
        match best {
            Some((m, a, b)) if m > tau => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }
    clusters
}

pub fn select_redundant(graph: &NetworkGraph, layer: NodeId, tau: f64, rule: KeepRule) -> Result<RedundantSelection> {
    if !(tau > -1.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("similarity threshold {tau} not in (-1, 1]")));
    }
    let weight = conv_weight(graph, layer)?;
    let clusters = redundant_clusters(weight, tau);
    let mut rng = match rule {
        KeepRule::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        KeepRule::LowestIndex => None,
    };
    let mut keep: Vec<usize> = clusters
        .iter()
        .map(|c| match rng.as_mut() {
            Some(r) => c[r.random_range(0..c.len())],
            None => c[0],
        })
        .collect();
    keep.sort_unstable();
    let prune = (0..weight.dim(0)).filter(|c| keep.binary_search(c).is_err()).collect();
    Ok(RedundantSelection { clusters, keep, prune })
}

/// `g(W_j) = sum_k ||W_j - W_k||_2` for every channel.
pub fn fpgm_scores(weight: &Tensor) -> Vec<f64> {
    let w = slices(weight);
    w.iter()
        .map(|a| {
            w.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum()
        })
        .collect()
}

pub fn score_fpgm(graph: &NetworkGraph, layer: NodeId) -> Result<Vec<ChannelScore>> {
    let weight = conv_weight(graph, layer)?;
    if weight.dim(0) < 2 {
        return Err(Error::invalid("geometric-median scoring needs at least two channels"));
    }
    Ok(fpgm_scores(weight)
        .into_iter()
        .enumerate()
        .map(|(channel, score)| ChannelScore { layer, channel, score })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Channels to keep (largest magnitudes), ascending.
    pub remain: Vec<usize>,
    /// Channels to suppress, ascending.
    pub prune: Vec<usize>,
    /// Midpoint between the r-th and (r+1)-th largest magnitude.
    pub theta: f64,
}

/// Splits channels into the `r` largest magnitudes and the rest.
pub fn partition_by_magnitude(m: &[f64], r: usize) -> Result<Partition> {
    if r == 0 || r >= m.len() {
        return Err(Error::invalid(format!("remaining count {r} not in [1, {})", m.len())));
    }
    let neg: Vec<f64> = m.iter().map(|v| -v).collect();
    let order = rank_ascending(&neg);
    let mut remain = order[..r].to_vec();
    let mut prune = order[r..].to_vec();
    remain.sort_unstable();
    prune.sort_unstable();
    let theta = 0.5 * (m[order[r - 1]] + m[order[r]]);
    Ok(Partition { remain, prune, theta })
}

/// Partition of a conv layer by `M_j = ||vec(W_j)||_1`.
pub fn autobalanced_partition(graph: &NetworkGraph, layer: NodeId, r: usize) -> Result<Partition> {
    let weight = conv_weight(graph, layer)?;
    partition_by_magnitude(&channel_norms(weight, Norm::L1), r)
}
