use serde::{Deserialize, Serialize};

use super::optim::{poly_lr, DecayPolicy, SgdParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_policy: DecayPolicy,
    pub power: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_h: f64,
    pub flip_v: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr0: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_policy: DecayPolicy::ConvWeights,
            power: 0.9,
            min_lr: 1e-6,
            batch_size: 8,
            seed: 0,
            flip_h: 0.5,
            flip_v: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.min_lr > 0.0 && self.min_lr < self.lr0) {
            return fail(format!("min_lr must be in (0, lr0), got {}", self.min_lr));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return fail(format!("power must be positive, got {}", self.power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        for p in [self.flip_h, self.flip_v] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("flip probabilities must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        poly_lr(epoch, self.epochs, self.lr0, self.power, self.min_lr)
    }

    pub fn sgd(&self, epoch: usize) -> SgdParams {
        SgdParams {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay: self.decay_policy,
        }
    }
}
