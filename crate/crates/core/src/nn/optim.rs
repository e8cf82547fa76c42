use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scalar::Real;

use super::ParamStore;

/// SGD with momentum, L2 weight decay and a step schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is additionally scaled by `multiplier`.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: vec![(60, 0.1), (80, 0.1)],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Validation, "learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Validation, "momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Validation, "weight decay must be non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }
}

/// `v ← μ·v + g + λ·p; p ← p − lr(epoch)·v` for every trainable entry, then clears gradients.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, config: &SgdConfig, epoch: usize) -> Result<()> {
    if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.trainable && p.value.grad.is_none()) {
        bail!(State, "parameter {} has no gradient", p.name);
    }
    let lr = T::lit(config.lr_at(epoch));
    let mu = T::lit(config.momentum);
    let wd = T::lit(config.weight_decay);
    for p in store.iter_mut() {
        if !p.trainable {
            p.value.zero_grad();
            continue;
        }
        let grad = p.value.grad.take().expect("checked above");
        let vel = p.velocity.get_or_insert_with(|| vec![T::zero(); grad.len()]);
        for ((v, &g), x) in vel.iter_mut().zip(&grad).zip(p.value.data_mut()) {
            *v = mu * *v + g + wd * *x;
            *x -= lr * *v;
        }
    }
    Ok(())
}
