//! Re-identification losses, ranking metrics and domain similarity.

mod domain;
mod eval;
mod losses;
pub mod tape;

pub use domain::{
    domain_similarity, finetune_policy, median_bandwidth, mmd_unbiased, DomainSimilarity, FinetunePolicy,
    PolicyThresholds,
};
pub use eval::{eval_cmc_map, EmbeddingSet, EvalReport, GalleryProbeSplit};
pub use losses::{
    batch_hard, contrastive, cosine_softmax, cross_entropy, hap2s, leaves, magnet, metric_loss, metric_loss_value,
    part_ce, quadruplet, traced_loss, triplet, LossKind, LossParams,
};
