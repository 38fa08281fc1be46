use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// `max(min_lr, lr0 * (1 - epoch / total)^power)`; epochs past `total` give `min_lr`.
pub fn poly_lr(epoch: usize, total_epochs: usize, lr0: f64, power: f64, min_lr: f64) -> f64 {
    if total_epochs == 0 {
        return lr0.max(min_lr);
    }
    let frac = 1.0 - (epoch.min(total_epochs) as f64 / total_epochs as f64);
    (lr0 * frac.powf(power)).max(min_lr)
}

/// Which parameters receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayPolicy {
    /// Convolution weights only.
    #[default]
    ConvWeights,
    /// Every trainable parameter.
    All,
}

/// Momentum buffers, one per trainable parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    velocities: Vec<Option<Tensor<T>>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let velocities =
            store.iter().map(|(_, p)| p.kind.is_trainable().then(|| Tensor::zeros(p.value.shape()))).collect();
        OptimizerState { velocities }
    }

    /// Velocities by parameter name.
    pub fn named<'a>(&'a self, store: &'a ParamStore<T>) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> {
        store.iter().zip(&self.velocities).filter_map(|((_, p), v)| v.as_ref().map(|v| (p.name.as_str(), v)))
    }

    /// Rebuilds state from named velocities; every trainable parameter needs one.
    pub fn from_named(store: &ParamStore<T>, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let mut velocities = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            if !p.kind.is_trainable() {
                velocities.push(None);
                continue;
            }
            let v = lookup(&p.name).ok_or_else(|| Error::MissingVelocity(p.name.clone()))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "velocity for `{}` has shape {:?}, parameter is {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            velocities.push(Some(v));
        }
        Ok(OptimizerState { velocities })
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor<T>> {
        self.velocities.get(index).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay: DecayPolicy,
}

/// Heavy-ball SGD: `g = grad + wd * p; v = m * v + g; p -= lr * v`, then
/// clears gradients. Parameters without a gradient are left untouched.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, p: SgdParams) -> Result<()> {
    if state.velocities.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, store has {}",
            state.velocities.len(),
            store.len()
        )));
    }
    let (lr, m) = (T::of(p.lr), T::of(p.momentum));
    for (param, vel) in store.iter_mut().zip(&mut state.velocities) {
        let Some(grad) = param.grad.take() else { continue };
        if !param.kind.is_trainable() {
            continue;
        }
        let v = vel.as_mut().ok_or_else(|| Error::MissingVelocity(param.name.clone()))?;
        let wd = match p.decay {
            DecayPolicy::All => T::of(p.weight_decay),
            DecayPolicy::ConvWeights if param.kind.decays() => T::of(p.weight_decay),
            DecayPolicy::ConvWeights => T::zero(),
        };
        let value = param.value_mut();
        for ((x, vx), &g) in value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            let g = g + wd * *x;
            *vx = m * *vx + g;
            *x = *x - lr * *vx;
        }
    }
    Ok(())
}
