use serde::{Deserialize, Serialize};

use super::unit_sum;
use crate::criteria::{
    channel_norms, embedding_variance, lasso_select, score_entropy, score_fpgm, score_nisp, score_taylor,
    select_redundant, thinet_contributions, thinet_greedy, ChannelScore, KeepRule, LossFn, Norm, ProbeBatch,
};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, NodeId, PruneUnit};

/// Criterion selection as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Criterion {
    L1,
    L2,
    Redundant {
        tau: f64,
        #[serde(default)]
        keep: KeepRule,
    },
    Fpgm,
    Entropy {
        #[serde(default = "default_bins")]
        bins: usize,
    },
    Taylor,
    Thinet {
        #[serde(default = "default_locations")]
        locations: usize,
        #[serde(default)]
        seed: u64,
    },
    Lasso {
        #[serde(default = "default_locations")]
        locations: usize,
        #[serde(default)]
        seed: u64,
    },
    Nisp,
}

fn default_bins() -> usize {
    16
}

fn default_locations() -> usize {
    4
}

impl Criterion {
    pub fn needs_probe(&self) -> bool {
        matches!(
            self,
            Criterion::Entropy { .. }
                | Criterion::Taylor
                | Criterion::Thinet { .. }
                | Criterion::Lasso { .. }
                | Criterion::Nisp
        )
    }

    /// Selection criteria whose ranking depends on how many channels go.
    pub(crate) fn is_selection(&self) -> bool {
        matches!(self, Criterion::Thinet { .. } | Criterion::Lasso { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
            Criterion::Redundant { .. } => "redundant",
            Criterion::Fpgm => "fpgm",
            Criterion::Entropy { .. } => "entropy",
            Criterion::Taylor => "taylor",
            Criterion::Thinet { .. } => "thinet",
            Criterion::Lasso { .. } => "lasso",
            Criterion::Nisp => "nisp",
        }
    }
}

fn per_layer(scores: &[ChannelScore], layer: NodeId, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for s in scores.iter().filter(|s| s.layer == layer) {
        out[s.channel] = s.score;
    }
    out
}

fn l1_unit(graph: &NetworkGraph, unit: &PruneUnit) -> Vec<f64> {
    unit_sum(unit, |l| channel_norms(graph.param(l, 0), Norm::L1))
}

/// Single-layer units whose feature map feeds exactly one convolution.
fn reconstructable(graph: &NetworkGraph, unit: &PruneUnit) -> bool {
    if unit.is_coupled() {
        return false;
    }
    let fmap = graph.feature_map_node(unit.layers[0]);
    matches!(graph.consumers(fmap), [c] if matches!(graph.node(*c).kind, LayerKind::Conv { .. }))
}

/// Per-unit, per-channel scores (lower = prune first). A unit's score is
/// the sum of its layers' scores. `removes[u]` is how many channels the
/// caller is about to take from unit `u`; only ThiNet and LASSO use it.
/// Those two fall back to l1 on residual-coupled units and on layers that do
/// not feed a single convolution.
pub fn unit_scores(
    criterion: &Criterion,
    graph: &NetworkGraph,
    units: &[PruneUnit],
    removes: &[usize],
    probes: &[ProbeBatch],
    loss: &LossFn<'_>,
) -> Result<Vec<Vec<f64>>> {
    if removes.len() != units.len() {
        return Err(Error::shape("unit_scores", "removal counts", units.len(), removes.len()));
    }
    if criterion.needs_probe() && probes.is_empty() {
        return Err(Error::invalid(format!("criterion {} needs probe data", criterion.label())));
    }
    let merged = if criterion.needs_probe() && !matches!(criterion, Criterion::Taylor) {
        Some(ProbeBatch::concat(probes)?)
    } else {
        None
    };
    let graph_wide: Option<Vec<ChannelScore>> = match criterion {
        Criterion::Taylor => {
            let mut acc: Option<Vec<ChannelScore>> = None;
            for p in probes {
                let s = score_taylor(graph, loss, p)?;
                match acc.as_mut() {
                    None => acc = Some(s),
                    Some(a) => a.iter_mut().zip(s).for_each(|(a, b)| a.score += b.score),
                }
            }
            acc.map(|mut a| {
                a.iter_mut().for_each(|s| s.score /= probes.len() as f64);
                a
            })
        }
        Criterion::Nisp => {
            let probe = merged.as_ref().expect("probe merged above");
            Some(score_nisp(graph, &embedding_variance(graph, probe)?)?)
        }
        _ => None,
    };
    let mut out = Vec::with_capacity(units.len());
    for (unit, &remove) in units.iter().zip(removes) {
        let c = unit.channels;
        let scores = match criterion {
            Criterion::L1 => l1_unit(graph, unit),
            Criterion::L2 => unit_sum(unit, |l| channel_norms(graph.param(l, 0), Norm::L2)),
            Criterion::Fpgm => {
                let mut acc = vec![0.0; c];
                for &l in &unit.layers {
                    for s in score_fpgm(graph, l)? {
                        acc[s.channel] += s.score;
                    }
                }
                acc
            }
            Criterion::Redundant { tau, keep } => {
                // Redundant channels rank below every representative; l1 orders within each band.
                let l1 = l1_unit(graph, unit);
                let offset = l1.iter().cloned().fold(0.0, f64::max) + 1.0;
                let mut redundant = vec![true; c];
                for &l in &unit.layers {
                    let sel = select_redundant(graph, l, *tau, *keep)?;
                    for k in sel.keep {
                        redundant[k] = false;
                    }
                }
                l1.iter().zip(&redundant).map(|(v, r)| if *r { *v } else { v + offset }).collect()
            }
            Criterion::Entropy { bins } => {
                let probe = merged.as_ref().expect("probe merged above");
                let mut acc = vec![0.0; c];
                for &l in &unit.layers {
                    for s in score_entropy(graph, l, probe, *bins)? {
                        acc[s.channel] += s.score;
                    }
                }
                acc
            }
            Criterion::Taylor | Criterion::Nisp => {
                let all = graph_wide.as_ref().expect("computed above");
                unit_sum(unit, |l| per_layer(all, l, c))
            }
            Criterion::Thinet { locations, seed } | Criterion::Lasso { locations, seed } => {
                if remove == 0 || remove >= c || !reconstructable(graph, unit) {
                    l1_unit(graph, unit)
                } else {
                    let probe = merged.as_ref().expect("probe merged above");
                    let samples = thinet_contributions(graph, unit.layers[0], probe, *locations, *seed)?;
                    if matches!(criterion, Criterion::Thinet { .. }) {
                        // Greedy removal order becomes the score.
                        let order = thinet_greedy(&samples.x, c - 1);
                        let mut s = vec![(c - 1) as f64; c];
                        for (rank, ch) in order.into_iter().enumerate() {
                            s[ch] = rank as f64;
                        }
                        s
                    } else {
                        let sel = lasso_select(&samples.x, &samples.y, c - remove)?;
                        sel.beta.iter().map(|b| b.abs()).collect()
                    }
                }
            }
        };
        out.push(scores);
    }
    debug_assert!(out.iter().zip(units).all(|(s, u)| s.len() == u.channels));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{prune_units, GraphBuilder};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_round_trip() {
        let c: Criterion = toml::from_str("name = \"redundant\"\ntau = 0.9").unwrap();
        assert_eq!(
            c,
            Criterion::Redundant {
                tau: 0.9,
                keep: KeepRule::LowestIndex
            }
        );
        let t: Criterion = toml::from_str("name = \"thinet\"").unwrap();
        assert_eq!(t, Criterion::Thinet { locations: 4, seed: 0 });
    }

    #[test]
    fn redundant_ranks_duplicates_first() {
        let mut b = GraphBuilder::new();
        let x = b.input("in", 1);
        let c = b.conv("c", x, 3, 1, 1, 0, false);
        let g = b.global_avg_pool("gap", c);
        b.dense("fc", g, 2);
        let mut graph = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *graph.param_mut(c, 0) = Tensor::new(vec![3, 1, 1, 1], vec![5.0, 1.0, 5.0]).unwrap();
        let units = prune_units(&graph);
        let crit = Criterion::Redundant {
            tau: 0.99,
            keep: KeepRule::LowestIndex,
        };
        let s = unit_scores(&crit, &graph, &units, &[1], &[], &|_: &mut _, v, _: &[usize]| Ok(v)).unwrap();
        // all three are parallel; channel 0 represents the cluster
        assert!(s[0][1] < s[0][2] && s[0][2] < s[0][0]);
    }
}
