//! Gallery/query ranking metrics: CMC curve and mean average precision.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embeddings with their identity and camera labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub features: Vec<Vec<f32>>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(features: Vec<Vec<f32>>, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        if features.len() != ids.len() || features.len() != cams.len() {
            return Err(Error::invalid("embedding set: features, ids and cams differ in length"));
        }
        if let Some(d) = features.first().map(Vec::len) {
            if features.iter().any(|f| f.len() != d) {
                return Err(Error::invalid("embedding set: ragged feature rows"));
            }
        }
        Ok(EmbeddingSet { features, ids, cams })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryProbeSplit {
    pub gallery: EmbeddingSet,
    pub query: EmbeddingSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[k-1]` = fraction of evaluated queries matched within the top k.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision per query; `None` for skipped queries.
    pub ap: Vec<Option<f64>>,
    pub skipped: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    /// `rank,cmc` rows.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(out, "{},{}", k + 1, v);
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "rank1={:.4} rank5={:.4} rank10={:.4} mAP={:.4}",
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.map
        )
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum()
}

/// Ranks the gallery by Euclidean distance for every query (ties by
/// gallery index), drops same-identity same-camera entries and scores the
/// remaining list. Queries without a cross-camera match are skipped.
pub fn eval_cmc_map(split: &GalleryProbeSplit, max_rank: usize) -> Result<EvalReport> {
    let (g, q) = (&split.gallery, &split.query);
    if g.is_empty() || q.is_empty() || max_rank == 0 {
        return Err(Error::invalid("evaluation needs a gallery, queries and max_rank >= 1"));
    }
    let mut hits = vec![0usize; max_rank];
    let mut ap = Vec::with_capacity(q.len());
    for qi in 0..q.len() {
        let dist: Vec<f64> = g.features.iter().map(|f| sq_dist(&q.features[qi], f)).collect();
        let mut order: Vec<usize> = (0..g.len())
            .filter(|&j| !(g.ids[j] == q.ids[qi] && g.cams[j] == q.cams[qi]))
            .collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let relevant: Vec<bool> = order.iter().map(|&j| g.ids[j] == q.ids[qi]).collect();
        let n_rel = relevant.iter().filter(|r| **r).count();
        if n_rel == 0 {
            ap.push(None);
            continue;
        }
        let first = relevant.iter().position(|r| *r).expect("has a match");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        let mut found = 0usize;
        let mut sum = 0.0f64;
        for (pos, _) in relevant.iter().enumerate().filter(|(_, r)| **r) {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
        ap.push(Some(sum / n_rel as f64));
    }
    let evaluated = ap.iter().flatten().count();
    if evaluated == 0 {
        return Err(Error::NanMetric("no query has a valid gallery match".into()));
    }
    let cmc = hits.iter().map(|&h| h as f64 / evaluated as f64).collect();
    let map = ap.iter().flatten().sum::<f64>() / evaluated as f64;
    Ok(EvalReport {
        cmc,
        map,
        skipped: ap.len() - evaluated,
        ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[f32], ids: &[usize], cams: &[usize]) -> EmbeddingSet {
        EmbeddingSet::new(points.iter().map(|&p| vec![p]).collect(), ids.to_vec(), cams.to_vec()).unwrap()
    }

    #[test]
    fn exact_match_is_perfect() {
        let split = GalleryProbeSplit {
            gallery: set(&[0.0, 5.0, 9.0], &[1, 2, 3], &[1, 1, 1]),
            query: set(&[0.0], &[1], &[0]),
        };
        let r = eval_cmc_map(&split, 3).unwrap();
        assert_eq!(r.rank1(), 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn third_position_gives_one_third() {
        let split = GalleryProbeSplit {
            gallery: set(&[1.0, 2.0, 3.0, 4.0], &[7, 8, 1, 9], &[1, 1, 1, 1]),
            query: set(&[0.0], &[1], &[0]),
        };
        let r = eval_cmc_map(&split, 4).unwrap();
        assert_eq!(r.cmc, vec![0.0, 0.0, 1.0, 1.0]);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_matches_are_ignored() {
        let split = GalleryProbeSplit {
            gallery: set(&[0.0, 1.0], &[1, 1], &[0, 1]),
            query: set(&[0.0, 3.0], &[1, 2], &[0, 0]),
        };
        let r = eval_cmc_map(&split, 2).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.ap[0], Some(1.0));
    }
}
