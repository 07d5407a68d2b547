//! Reconstruction criteria: ThiNet greedy selection and LASSO regression
//! over the next convolution's sampled outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv_weight, probe_forward, ProbeBatch};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, NodeId};

/// Per-channel contributions `x[s][c]` to sampled outputs `y[s] = sum_c x[s][c]`
/// of the consumer convolution (bias excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionSamples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Samples `locations` random `(out channel, y, x)` positions per probe
/// image at the single convolution consuming `layer`'s activation.
pub fn thinet_contributions(
    graph: &NetworkGraph,
    layer: NodeId,
    probe: &ProbeBatch,
    locations: usize,
    seed: u64,
) -> Result<ReconstructionSamples> {
    conv_weight(graph, layer)?;
    if locations == 0 || probe.is_empty() {
        return Err(Error::invalid("reconstruction needs a non-empty probe and at least one location"));
    }
    let fmap = graph.feature_map_node(layer);
    let consumer = match graph.consumers(fmap) {
        [c] if graph.node(*c).kind.is_conv() => *c,
        _ => {
            return Err(Error::invalid(format!(
                "layer {} does not feed a single convolution",
                graph.node(layer).name
            )))
        }
    };
    let LayerKind::Conv { stride, pad, kernel, .. } = graph.node(consumer).kind else {
        unreachable!("checked above")
    };
    let (trace, outs, _) = probe_forward(graph, &probe.inputs)?;
    let h = trace.value(outs[fmap.0]);
    let out_shape = trace.value(outs[consumer.0]).shape().to_vec();
    let w = graph.param(consumer, 0);
    let (n, c, hh, ww) = (h.dim(0), h.dim(1), h.dim(2), h.dim(3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * locations);
    for img in 0..n {
        for _ in 0..locations {
            let o = rng.random_range(0..out_shape[1]);
            let oy = rng.random_range(0..out_shape[2]);
            let ox = rng.random_range(0..out_shape[3]);
            let row: Vec<f64> = (0..c)
                .map(|ch| {
                    let mut s = 0.0f64;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= hh as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= ww as isize {
                                continue;
                            }
                            let hv = h.data()[((img * c + ch) * hh + iy as usize) * ww + ix as usize];
                            let wv = w.data()[((o * c + ch) * kernel + ky) * kernel + kx];
                            s += f64::from(hv) * f64::from(wv);
                        }
                    }
                    s
                })
                .collect();
            x.push(row);
        }
    }
    let y = x.iter().map(|r| r.iter().sum()).collect();
    Ok(ReconstructionSamples { x, y })
}

/// Greedy removal order: each step adds the channel whose removal keeps
/// `sum_s (sum_{c in T} x[s][c])^2` smallest. Ties go to the lower index.
pub fn thinet_greedy(x: &[Vec<f64>], remove: usize) -> Vec<usize> {
    let channels = x.first().map_or(0, Vec::len);
    let mut partial = vec![0.0f64; x.len()];
    let mut taken = vec![false; channels];
    let mut order = Vec::with_capacity(remove);
    for _ in 0..remove.min(channels) {
        let mut best: Option<(f64, usize)> = None;
        for ch in (0..channels).filter(|&c| !taken[c]) {
            let cost: f64 = x.iter().zip(&partial).map(|(r, p)| (p + r[ch]).powi(2)).sum();
            if best.is_none_or(|(b, _)| cost < b) {
                best = Some((cost, ch));
            }
        }
        let (_, ch) = best.expect("a candidate remains");
        taken[ch] = true;
        for (p, r) in partial.iter_mut().zip(x) {
            *p += r[ch];
        }
        order.push(ch);
    }
    order
}

/// Channels of `layer` to prune (in greedy order) so that `target_keep` remain.
pub fn select_thinet(
    graph: &NetworkGraph,
    layer: NodeId,
    target_keep: usize,
    probe: &ProbeBatch,
    locations: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let c = graph
        .out_channels(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} is not a convolution")))?;
    if target_keep == 0 || target_keep > c {
        return Err(Error::invalid(format!("target_keep {target_keep} not in [1, {c}]")));
    }
    let samples = thinet_contributions(graph, layer, probe, locations, seed)?;
    Ok(thinet_greedy(&samples.x, c - target_keep))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `max_j |X_j . y| / N`: the smallest penalty with an all-zero solution.
pub fn lasso_lambda_max(x: &[Vec<f64>], y: &[f64]) -> f64 {
    let channels = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    (0..channels)
        .map(|j| x.iter().zip(y).map(|(r, yi)| r[j] * yi).sum::<f64>().abs() / n)
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent for `(1/2N)||y - X b||^2 + lambda ||b||_1`,
/// stopping when no coordinate moves more than 1e-6 or after 10^4 sweeps.
pub fn lasso_coordinate_descent(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    const TOL: f64 = 1e-6;
    const MAX_SWEEPS: usize = 10_000;
    let channels = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    let z: Vec<f64> = (0..channels).map(|j| x.iter().map(|r| r[j] * r[j]).sum::<f64>() / n).collect();
    let mut beta = vec![0.0f64; channels];
    let mut resid = y.to_vec();
    for _ in 0..MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        for j in 0..channels {
            if z[j] == 0.0 {
                continue;
            }
            let rho = x.iter().zip(&resid).map(|(r, e)| r[j] * e).sum::<f64>() / n + z[j] * beta[j];
            let new = soft_threshold(rho, lambda) / z[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for (e, r) in resid.iter_mut().zip(x) {
                    *e -= r[j] * delta;
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta <= TOL {
            break;
        }
    }
    beta
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoSelection {
    pub beta: Vec<f64>,
    /// Channels with a zero coefficient.
    pub prune: Vec<usize>,
    pub lambda: f64,
    /// Set when bisection could not hit the requested count exactly.
    pub warning: bool,
}

/// Bisects the penalty (at most 50 steps over `[0, lambda_max]`) until
/// exactly `target_keep` coefficients are non-zero.
pub fn lasso_select(x: &[Vec<f64>], y: &[f64], target_keep: usize) -> Result<LassoSelection> {
    let channels = x.first().map_or(0, Vec::len);
    if target_keep == 0 || target_keep >= channels {
        return Err(Error::invalid(format!("target_keep {target_keep} not in [1, {channels})")));
    }
    let nnz = |b: &[f64]| b.iter().filter(|v| **v != 0.0).count();
    let (mut lo, mut hi) = (0.0, lasso_lambda_max(x, y));
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let beta = lasso_coordinate_descent(x, y, mid);
        let k = nnz(&beta);
        let gap = k.abs_diff(target_keep);
        if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
            best = Some((gap, mid, beta));
        }
        match k.cmp(&target_keep) {
            std::cmp::Ordering::Equal => break,
            std::cmp::Ordering::Greater => lo = mid,
            std::cmp::Ordering::Less => hi = mid,
        }
    }
    let (gap, lambda, beta) = best.expect("at least one bisection step");
    let prune = beta.iter().enumerate().filter(|(_, b)| **b == 0.0).map(|(i, _)| i).collect();
    Ok(LassoSelection {
        beta,
        prune,
        lambda,
        warning: gap != 0,
    })
}

pub fn select_lasso(
    graph: &NetworkGraph,
    layer: NodeId,
    target_keep: usize,
    probe: &ProbeBatch,
    locations: usize,
    seed: u64,
) -> Result<LassoSelection> {
    let samples = thinet_contributions(graph, layer, probe, locations, seed)?;
    lasso_select(&samples.x, &samples.y, target_keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_prefers_silent_channel_then_lower_index() {
        let x = vec![vec![1.0, 0.0, 1.0], vec![2.0, 0.0, 2.0]];
        assert_eq!(thinet_greedy(&x, 2), vec![1, 0]);
    }

    #[test]
    fn single_column_closed_form() {
        let x: Vec<Vec<f64>> = [1.0, 2.0, -1.0, 0.5].iter().map(|&v| vec![v]).collect();
        let y = [2.0, 3.5, -2.5, 1.0];
        let n = 4.0;
        let xy: f64 = x.iter().zip(&y).map(|(r, y)| r[0] * y).sum::<f64>() / n;
        let xx: f64 = x.iter().map(|r| r[0] * r[0]).sum::<f64>() / n;
        for lambda in [0.0, 0.3, 1.0, 5.0] {
            let b = lasso_coordinate_descent(&x, &y, lambda)[0];
            let expect = soft_threshold(xy, lambda) / xx;
            assert!((b - expect).abs() <= 1e-6, "{lambda}: {b} vs {expect}");
        }
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let x = vec![vec![1.0, 0.5], vec![0.2, -1.0], vec![0.3, 0.3]];
        let y = [1.0, -0.5, 0.2];
        let b = lasso_coordinate_descent(&x, &y, lasso_lambda_max(&x, &y));
        assert!(b.iter().all(|v| *v == 0.0));
    }
}
