use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{BatchNormParams, ConvParams, Element, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Per-forward state: mode, dropout randomness, pending batch-norm
/// running-stat updates and an optional shape trace.
pub struct ForwardCtx<'a, T> {
    pub training: bool,
    rng: Option<&'a mut dyn RngCore>,
    pub(crate) updates: Vec<(ParamId, Tensor<T>)>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a, T: Element> ForwardCtx<'a, T> {
    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        ForwardCtx { training: true, rng: Some(rng), updates: Vec::new(), trace: None }
    }

    pub fn eval() -> Self {
        ForwardCtx { training: false, rng: None, updates: Vec::new(), trace: None }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn take_trace(&mut self) -> Vec<(String, Vec<usize>)> {
        self.trace.take().unwrap_or_default()
    }

    pub(crate) fn record(&mut self, name: &str, v: &Var<T>) {
        if let Some(t) = &mut self.trace {
            t.push((name.to_string(), v.shape().to_vec()));
        }
    }

    pub(crate) fn dropout(&mut self, tape: &mut Tape<T>, x: &Var<T>, rate: f64) -> Result<Var<T>> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => tape.dropout(x, rate, true, &mut **rng),
            _ => Ok(x.clone()),
        }
    }

    /// Running-stat updates collected during a training forward.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates
    }
}

/// Creates named, He-initialized parameters in construction order.
pub(crate) struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    pub fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn he_normal(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(rng)));
        self.store.add(self.full_name(leaf), ParamKind::ConvWeight, t)
    }

    pub fn constant(&mut self, leaf: &str, kind: ParamKind, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(self.full_name(leaf), kind, Tensor::full(shape, T::of(value)))
    }

    pub fn conv(&mut self, cin: usize, cout: usize, kernel: usize, params: ConvParams, bias: bool) -> Result<Conv> {
        let cg = cin / params.groups;
        let weight = self.he_normal("weight", &[cout, cg, kernel, kernel], cg * kernel * kernel)?;
        let bias = if bias { Some(self.constant("bias", ParamKind::Bias, &[cout], 0.0)?) } else { None };
        Ok(Conv { weight, bias, params })
    }

    pub fn batch_norm(&mut self, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.constant("weight", ParamKind::BnGamma, &[channels], 1.0)?,
            beta: self.constant("bias", ParamKind::BnBeta, &[channels], 0.0)?,
            mean: self.constant("running_mean", ParamKind::RunningMean, &[channels], 0.0)?,
            var: self.constant("running_var", ParamKind::RunningVar, &[channels], 1.0)?,
            momentum: 0.1,
            epsilon: 1e-5,
        })
    }

    /// Bias-free convolution followed by batch norm, scoped as `name.conv` / `name.bn`.
    pub fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: ConvParams,
    ) -> Result<ConvBn> {
        self.scope(name, |b| {
            let conv = b.scope("conv", |b| b.conv(cin, cout, kernel, params, false))?;
            let bn = b.scope("bn", |b| b.batch_norm(cout))?;
            Ok(ConvBn { conv, bn })
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
}

impl Conv {
    pub fn forward<T: Element>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, &w, b.as_ref(), self.params)
    }

    pub fn out_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Var<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let params = BatchNormParams { training: ctx.training, momentum: self.momentum, epsilon: self.epsilon };
        let (y, running) =
            tape.batch_norm2d(x, &gamma, &beta, store.value(self.mean), store.value(self.var), params)?;
        if let Some((m, v)) = running {
            ctx.updates.push((self.mean, m));
            ctx.updates.push((self.var, v));
        }
        Ok(y)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &Var<T>,
        ctx: &mut ForwardCtx<'_, T>,
        relu: bool,
    ) -> Result<Var<T>> {
        let y = self.conv.forward(store, tape, x)?;
        let y = self.bn.forward(store, tape, &y, ctx)?;
        if relu {
            tape.relu(&y)
        } else {
            Ok(y)
        }
    }

    /// Trainable parameter ids (conv weight, BN gamma and beta).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv.weight];
        ids.extend(self.conv.bias);
        ids.extend(self.bn.param_ids());
        ids
    }
}
