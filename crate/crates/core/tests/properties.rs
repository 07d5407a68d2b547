use std::collections::{BTreeMap, HashSet};

use chanprune::criteria::{entropy_of, thinet_greedy, Norm};
use chanprune::graph::{
    build_toy_resnet, count_flops, deserialize, materialize, prune_units, serialize, NetworkGraph, PruneMask, ToyNetSpec,
};
use chanprune::reid::{eval_cmc_map, mmd_unbiased, EmbeddingSet, GalleryProbeSplit};
use chanprune::strategies::{psfp_rate, PsfpState};
use chanprune::tensor::{conv2d, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INPUT: [usize; 4] = [1, 3, 16, 8];

fn toy(seed: u64, w0: usize, w1: usize, blocks: usize) -> NetworkGraph {
    let spec = ToyNetSpec {
        widths: [w0, w1],
        blocks,
        embedding_dim: 8,
        ..ToyNetSpec::default()
    };
    build_toy_resnet(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
    let t = Tensor::randn(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_its_input(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0, stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let mix: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let mix = Tensor::new(x.shape().to_vec(), mix).unwrap();
        let lhs = conv2d(&mix, &w, None, stride, pad).unwrap();
        let cx = conv2d(&x, &w, None, stride, pad).unwrap();
        let cy = conv2d(&y, &w, None, stride, pad).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-3 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn pruning_never_increases_flops(seed in 0u64..1000, w0 in 2usize..10, w1 in 2usize..10, blocks in 1usize..3) {
        let g = toy(seed, w0, w1, blocks);
        let before = count_flops(&g, &INPUT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut mask = PruneMask::all_keep(&g);
        for unit in prune_units(&g) {
            // Channel 0 always survives so no unit is emptied.
            for c in 1..unit.channels {
                if rand::Rng::random_bool(&mut rng, 0.5) {
                    for &l in &unit.layers {
                        mask.set(l, c, false);
                    }
                }
            }
        }
        let pruned = materialize(&g, &mask).unwrap();
        prop_assert!(count_flops(&pruned, &INPUT).unwrap() <= before);
    }

    #[test]
    fn prune_units_are_disjoint_and_consistent(seed in 0u64..1000, w0 in 1usize..8, w1 in 1usize..8, blocks in 1usize..4) {
        let g = toy(seed, w0, w1, blocks);
        let mut seen = HashSet::new();
        for unit in prune_units(&g) {
            for &l in &unit.layers {
                prop_assert!(g.node(l).kind.is_conv());
                prop_assert_eq!(g.out_channels(l), Some(unit.channels));
                for c in 0..unit.channels {
                    prop_assert!(seen.insert((l, c)), "channel {c} of {l} in two units");
                }
            }
        }
        let total: usize = g.conv_ids().iter().map(|&l| g.out_channels(l).unwrap()).sum();
        prop_assert!(seen.len() <= total);
    }

    #[test]
    fn serialize_round_trips(seed in 0u64..1000, w0 in 1usize..8, w1 in 1usize..8, blocks in 1usize..3) {
        let g = toy(seed, w0, w1, blocks);
        let bytes = serialize(&g);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(serialize(&back), bytes);
        prop_assert_eq!(back.structure_signature(), g.structure_signature());
    }

    #[test]
    fn cmc_is_monotone_and_bounded(seed in 0u64..1000, ids in 2usize..8, per in 1usize..4) {
        let n = ids * per;
        let labels: Vec<usize> = (0..n).map(|i| i % ids).collect();
        let gallery = EmbeddingSet::new(rows(seed, n, 4), labels.clone(), vec![0; n]).unwrap();
        let query = EmbeddingSet::new(rows(seed + 1, ids, 4), (0..ids).collect(), vec![1; ids]).unwrap();
        let r = eval_cmc_map(&GalleryProbeSplit { gallery, query }, n).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.cmc.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&r.map));
        prop_assert!((r.cmc[n - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psfp_rate_stays_in_bounds(p in 0.0f64..0.95, decay in 0.05f64..4.0, epochs in 1usize..50, t in 0.0f64..500.0) {
        let s = PsfpState::new(p, decay, epochs, Norm::L2).unwrap();
        let r = psfp_rate(&s, t);
        prop_assert!(r >= -1e-12 && r <= p + 1e-12);
        prop_assert!(psfp_rate(&s, t + 1.0) >= r - 1e-12);
    }

    #[test]
    fn thinet_order_is_a_set_of_distinct_channels(seed in 0u64..1000, samples in 1usize..12, channels in 1usize..10, remove in 0usize..12) {
        let x: Vec<Vec<f64>> = rows(seed, samples, channels)
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect();
        let order = thinet_greedy(&x, remove);
        prop_assert_eq!(order.len(), remove.min(channels));
        let distinct: HashSet<_> = order.iter().collect();
        prop_assert_eq!(distinct.len(), order.len());
        prop_assert!(order.iter().all(|&c| c < channels));
    }

    #[test]
    fn entropy_is_at_most_log_bins(values in prop::collection::vec(-100.0f64..100.0, 1..200), bins in 1usize..64) {
        let h = entropy_of(&values, bins);
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (bins as f64).ln() + 1e-9);
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_identical_sets(seed in 0u64..1000, n in 2usize..12, m in 2usize..12, sigma in 0.2f64..5.0) {
        let x = rows(seed, n, 3);
        let y = rows(seed + 7, m, 3);
        let xy = mmd_unbiased(&x, &y, sigma);
        let yx = mmd_unbiased(&y, &x, sigma);
        prop_assert!((xy - yx).abs() < 1e-9);
        prop_assert_eq!(mmd_unbiased(&x, &x, sigma), 0.0);
    }
}

#[test]
fn empty_mask_materializes_to_the_same_structure() {
    let g = toy(3, 6, 12, 2);
    let same = materialize(&g, &PruneMask::from_layers(BTreeMap::new())).unwrap();
    assert_eq!(same.structure_signature(), g.structure_signature());
}
