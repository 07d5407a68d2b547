//! Ranks the channels of a freshly initialised toy net with the
//! weight-only criteria and prints the five weakest per criterion.

use chanprune::criteria::{redundant_clusters, rank_ascending, score_fpgm, score_lp_norm, Norm};
use chanprune::graph::{build_toy_resnet, ToyNetSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let graph = build_toy_resnet(&ToyNetSpec::default(), &mut ChaCha8Rng::seed_from_u64(7))?;
    let layer = *graph.conv_ids().get(1).ok_or_else(|| anyhow::anyhow!("toy net has no second conv"))?;
    println!("layer {}", graph.node(layer).name);

    for (name, norm) in [("l1", Norm::L1), ("l2", Norm::L2)] {
        let scores: Vec<f64> = score_lp_norm(&graph, norm)
            .into_iter()
            .filter(|s| s.layer == layer)
            .map(|s| s.score)
            .collect();
        println!("{name:>5}: weakest {:?}", &rank_ascending(&scores)[..5]);
    }
    let fpgm: Vec<f64> = score_fpgm(&graph, layer)?.into_iter().map(|s| s.score).collect();
    println!(" fpgm: weakest {:?}", &rank_ascending(&fpgm)[..5]);

    let clusters = redundant_clusters(graph.param(layer, 0), 0.3);
    let redundant = clusters.iter().filter(|c| c.len() > 1).count();
    println!("{} clusters at tau 0.3, {redundant} with more than one channel", clusters.len());
    Ok(())
}
