//! CMC / mAP on a hand-built gallery, plus the domain similarity of two
//! embedding clouds.

use chanprune::reid::{domain_similarity, eval_cmc_map, EmbeddingSet, GalleryProbeSplit};

fn main() -> anyhow::Result<()> {
    // Three identities, each seen by cameras 0 and 1 in the gallery.
    let gallery = EmbeddingSet::new(
        vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![1.0, 0.0],
            vec![1.2, 0.1],
            vec![0.0, 1.0],
            vec![0.6, 0.4],
        ],
        vec![0, 0, 1, 1, 2, 2],
        vec![0, 1, 0, 1, 0, 1],
    )?;
    let query = EmbeddingSet::new(vec![vec![0.05, 0.0], vec![0.9, 0.1], vec![0.2, 0.8]], vec![0, 1, 2], vec![0, 0, 0])?;
    let report = eval_cmc_map(&GalleryProbeSplit { gallery, query }, 5)?;
    println!("{}", report.summary_line());
    print!("{}", report.cmc_csv());

    let source: Vec<Vec<f32>> = (0..32).map(|i| vec![(i % 8) as f32 * 0.1, 1.0]).collect();
    let near: Vec<Vec<f32>> = (0..32).map(|i| vec![(i % 8) as f32 * 0.1 + 0.05, 1.0]).collect();
    let far: Vec<Vec<f32>> = (0..32).map(|i| vec![1.0, (i % 8) as f32 * 0.1]).collect();
    for (name, target) in [("near", &near), ("far", &far)] {
        let s = domain_similarity(&source, target)?;
        println!("{name}: cosine distance {:.4}, MMD^2 {:.4}", s.cosine_distance, s.mmd);
    }
    Ok(())
}
