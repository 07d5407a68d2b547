use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// Velocity buffers are keyed by caller-chosen ids; a buffer is reset
/// whenever the parameter it tracks changes size (e.g. after pruning).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<(usize, usize), Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: HashMap::new(),
        })
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// `v <- momentum * v + grad + wd * param; param <- param - lr * v`.
    pub fn update(&mut self, key: (usize, usize), param: &mut Tensor) -> Result<()> {
        let grad = param
            .grad()
            .ok_or_else(|| Error::MissingGradient(format!("{key:?}")))?
            .to_vec();
        let v = self.velocity.entry(key).or_default();
        if v.len() != grad.len() {
            *v = vec![0.0; grad.len()];
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), vel) in param.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
            *vel = momentum * *vel + g + weight_decay * *p;
            *p -= lr * *vel;
        }
        if !param.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        Ok(())
    }
}

/// One optimizer step over a parameter list; the list position is the key.
pub fn sgd_step<'a>(sgd: &mut Sgd, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
    for (i, p) in params.into_iter().enumerate() {
        sgd.update((i, 0), p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(vec![data.len()], data.to_vec()).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.1,
        })
        .unwrap();
        let mut p = param(&[1.0, -2.0], &[3.0, 4.0]);
        sgd_step(&mut sgd, [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_step_subtracts_lr_grad() {
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        let mut p = param(&[1.0, -2.0], &[0.25, 4.0]);
        sgd_step(&mut sgd, [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.125, -4.0]);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let (lr, m, wd) = (0.1f32, 0.9f32, 0.01f32);
        let mut sgd = Sgd::new(SgdConfig {
            lr,
            momentum: m,
            weight_decay: wd,
        })
        .unwrap();
        let (w0, g1, g2) = (0.8f32, 0.3f32, -0.2f32);
        let mut p = param(&[w0], &[g1]);
        sgd_step(&mut sgd, [&mut p]).unwrap();
        p.set_grad(vec![g2]).unwrap();
        sgd_step(&mut sgd, [&mut p]).unwrap();
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = m * v1 + g2 + wd * w1;
        let w2 = w1 - lr * v2;
        assert!((p.data()[0] - w2).abs() <= 1e-7);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        let mut p = Tensor::zeros(&[2]);
        assert!(matches!(sgd_step(&mut sgd, [&mut p]), Err(Error::MissingGradient(_))));
    }
}
