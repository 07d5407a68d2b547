//! Evaluates every metric loss on one small batch and prints its value and
//! gradient norm. Classification losses also need head weights and are
//! exercised through the trainer instead.

use chanprune::reid::{metric_loss_value, LossKind, LossParams};
use chanprune::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let params = LossParams { parts: 2, ..Default::default() };
    let embeddings = Tensor::randn(&[labels.len(), 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for kind in LossKind::ALL.into_iter().filter(|k| !k.needs_classifier()) {
        let (value, grad) = metric_loss_value(kind, &embeddings, &labels, &params)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        println!("{kind:?}: loss {value:.4}, |grad| {norm:.4}");
    }
    Ok(())
}
