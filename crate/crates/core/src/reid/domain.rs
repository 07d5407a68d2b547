//! Source/target domain similarity and the resulting fine-tuning policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSimilarity {
    /// `1 - cos` between the two mean embeddings.
    pub cosine_distance: f64,
    /// Unbiased squared MMD with an RBF kernel.
    pub mmd: f64,
    /// RBF bandwidth (median pairwise distance of the pooled sample).
    pub bandwidth: f64,
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum()
}

fn mean(rows: &[Vec<f32>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d)
        .map(|k| rows.iter().map(|r| f64::from(r[k])).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Median of all pairwise Euclidean distances in `x ∪ y` (1.0 if zero).
pub fn median_bandwidth(x: &[Vec<f32>], y: &[Vec<f32>]) -> f64 {
    let all: Vec<&Vec<f32>> = x.iter().chain(y).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(dist2(all[i], all[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = match d.len() {
        0 => 0.0,
        n if n % 2 == 1 => d[n / 2],
        n => 0.5 * (d[n / 2 - 1] + d[n / 2]),
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased MMD² with kernel `exp(-||a-b||^2 / (2 sigma^2))`. Equal-size
/// samples use the paired h-statistic (so identical sets give exactly 0).
pub fn mmd_unbiased(x: &[Vec<f32>], y: &[Vec<f32>], sigma: f64) -> f64 {
    let k = |a: &[f32], b: &[f32]| (-dist2(a, b) / (2.0 * sigma * sigma)).exp();
    let (m, n) = (x.len(), y.len());
    if m == n {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
                }
            }
        }
        return s / (m * (m - 1)) as f64;
    }
    let within = |s: &[Vec<f32>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let cross: f64 = x.iter().flat_map(|a| y.iter().map(move |b| k(a, b))).sum::<f64>() / (m * n) as f64;
    within(x) + within(y) - 2.0 * cross
}

pub fn domain_similarity(source: &[Vec<f32>], target: &[Vec<f32>]) -> Result<DomainSimilarity> {
    if source.len() < 2 || target.len() < 2 {
        return Err(Error::invalid("domain similarity needs at least two embeddings per set"));
    }
    let d = source[0].len();
    if source.iter().chain(target).any(|r| r.len() != d) {
        return Err(Error::invalid("domain similarity: embedding dimensions differ"));
    }
    let (ms, mt) = (mean(source), mean(target));
    let ns = ms.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = mt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::invalid("domain similarity: zero-norm mean embedding"));
    }
    let cos = ms.iter().zip(&mt).map(|(a, b)| a * b).sum::<f64>() / (ns * nt);
    let bandwidth = median_bandwidth(source, target);
    Ok(DomainSimilarity {
        cosine_distance: 1.0 - cos,
        mmd: mmd_unbiased(source, target, bandwidth),
        bandwidth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetunePolicy {
    FreezeExtractor,
    TrainAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyThresholds {
    pub samples_per_class: f64,
    pub cosine_distance: f64,
}

impl Default for PolicyThresholds {
    fn default() -> Self {
        PolicyThresholds {
            samples_per_class: 20.0,
            cosine_distance: 0.1,
        }
    }
}

/// Freeze the feature extractor only when target data is scarce and the
/// domains are close. The MMD value is reported but not thresholded.
pub fn finetune_policy(cos_dist: f64, _mmd: f64, samples_per_class: f64, th: &PolicyThresholds) -> FinetunePolicy {
    if samples_per_class < th.samples_per_class && cos_dist < th.cosine_distance {
        FinetunePolicy::FreezeExtractor
    } else {
        FinetunePolicy::TrainAll
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets() {
        let s = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]];
        let d = domain_similarity(&s, &s).unwrap();
        assert!(d.cosine_distance.abs() < 1e-12);
        assert!(d.mmd.abs() < 1e-12);
    }

    #[test]
    fn antipodal_means() {
        let s = vec![vec![1.0, 0.0], vec![1.0, 0.2]];
        let t: Vec<Vec<f32>> = s.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        assert!((domain_similarity(&s, &t).unwrap().cosine_distance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn policy_branches() {
        let th = PolicyThresholds::default();
        assert_eq!(finetune_policy(0.005, 2.45, 15.0, &th), FinetunePolicy::FreezeExtractor);
        assert_eq!(finetune_policy(0.005, 2.45, 1000.0, &th), FinetunePolicy::TrainAll);
        assert_eq!(finetune_policy(1.5, 2.45, 15.0, &th), FinetunePolicy::TrainAll);
    }
}
