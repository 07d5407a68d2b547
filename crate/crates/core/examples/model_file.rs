//! Prunes half the channels of every prunable unit, writes the compact
//! model to disk and reads it back.

use chanprune::graph::{count_flops, count_params, deserialize, materialize, prune_units, serialize, build_toy_resnet, PruneMask, ToyNetSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let input = [1, 3, 64, 32];
    let graph = build_toy_resnet(&ToyNetSpec::default(), &mut ChaCha8Rng::seed_from_u64(3))?;
    let mut mask = PruneMask::all_keep(&graph);
    for unit in prune_units(&graph) {
        for c in unit.channels / 2..unit.channels {
            for &layer in &unit.layers {
                mask.set(layer, c, false);
            }
        }
    }
    let pruned = materialize(&graph, &mask)?;

    let path = std::env::temp_dir().join("chanprune-example.cpm");
    std::fs::write(&path, serialize(&pruned))?;
    let back = deserialize(&std::fs::read(&path)?)?;
    anyhow::ensure!(back.structure_signature() == pruned.structure_signature(), "round trip changed the graph");

    for (name, g) in [("dense", &graph), ("pruned", &pruned), ("reloaded", &back)] {
        println!("{name:>8}: {:>9} FLOPs, {:>6} params", count_flops(g, &input)?, count_params(g));
    }
    println!("wrote {}", path.display());
    Ok(())
}
