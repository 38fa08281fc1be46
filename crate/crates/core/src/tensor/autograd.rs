//! Reverse-mode differentiation over a linear tape.
//!
//! Every operator method evaluates eagerly. When the tape is recording and at
//! least one input is tracked, a node is appended holding the activations its
//! backward rule needs. Variable ids grow monotonically, so walking the nodes
//! in reverse insertion order is a valid topological order.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hasher};
use std::sync::Arc;

use rand::Rng;

use super::conv::{conv2d, conv2d_backward, ConvParams};
use super::elementwise::dropout_mask;
use super::norm::{batch_norm2d, batch_norm2d_backward, BatchNormParams};
use super::pool::{global_avg_pool2d, global_avg_pool2d_backward, max_pool2d, max_pool2d_backward, PoolParams};
use super::resize::{bilinear_upsample, bilinear_upsample_backward};
use super::softmax::{cross_entropy, cross_entropy_backward, softmax_backward, softmax_channelwise};
use super::{relu, Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub type VarId = usize;

/// A value produced on a tape.
#[derive(Clone)]
pub struct Var<T> {
    id: VarId,
    value: Arc<Tensor<T>>,
    tracked: bool,
}

impl<T: Element> Var<T> {
    pub fn id(&self) -> VarId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// True when gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.tracked
    }
}

enum Saved<T> {
    Conv { x: Arc<Tensor<T>>, w: Arc<Tensor<T>>, has_bias: bool, params: ConvParams },
    BatchNorm { normalized: Tensor<T>, inv_std: Vec<T>, gamma: Arc<Tensor<T>>, training: bool },
    Relu { out: Arc<Tensor<T>> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    GlobalAvgPool { input_shape: Vec<usize> },
    Bilinear { input_shape: Vec<usize>, align_corners: bool },
    Softmax { out: Arc<Tensor<T>> },
    Dropout { mask: Vec<T> },
    Add,
    Concat { sizes: Vec<usize> },
    CrossEntropy { probs: Tensor<T>, targets: Arc<[u8]> },
    Sum { shape: Vec<usize> },
    WeightedSum { weights: Arc<Tensor<T>> },
}

impl<T: Element> Saved<T> {
    fn backward(self, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(match self {
            Saved::Conv { x, w, has_bias, params } => {
                let grads = conv2d_backward(&x, &w, has_bias, params, g, needs[0])?;
                let mut out = vec![grads.input, Some(grads.weight)];
                if has_bias {
                    out.push(grads.bias);
                }
                out
            }
            Saved::BatchNorm { normalized, inv_std, gamma, training } => {
                let (dx, dg, db) = batch_norm2d_backward(&normalized, &inv_std, &gamma, training, g)?;
                vec![Some(dx), Some(dg), Some(db)]
            }
            Saved::Relu { out } => {
                vec![Some(out.zip_map(g, |y, gv| if y > T::zero() { gv } else { T::zero() })?)]
            }
            Saved::MaxPool { input_shape, argmax } => {
                vec![Some(max_pool2d_backward(&input_shape, &argmax, g)?)]
            }
            Saved::GlobalAvgPool { input_shape } => {
                vec![Some(global_avg_pool2d_backward(&input_shape, g)?)]
            }
            Saved::Bilinear { input_shape, align_corners } => {
                vec![Some(bilinear_upsample_backward(&input_shape, align_corners, g)?)]
            }
            Saved::Softmax { out } => vec![Some(softmax_backward(&out, g)?)],
            Saved::Dropout { mask } => {
                let mut dx = g.clone();
                for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                    *v = *v * m;
                }
                vec![Some(dx)]
            }
            Saved::Add => vec![Some(g.clone()), Some(g.clone())],
            Saved::Concat { sizes } => g.split_channels(&sizes)?.into_iter().map(Some).collect(),
            Saved::CrossEntropy { probs, targets } => {
                vec![Some(cross_entropy_backward(&probs, &targets, g.item())?)]
            }
            Saved::Sum { shape } => vec![Some(Tensor::full(&shape, g.item()))],
            Saved::WeightedSum { weights } => {
                let s = g.item();
                vec![Some(weights.map(|w| w * s))]
            }
        })
    }
}

struct TapeNode<T> {
    op: &'static str,
    inputs: Vec<Option<VarId>>,
    output: VarId,
    saved: Option<Saved<T>>,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf variable.
pub struct Gradients<T> {
    map: HashMap<VarId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.map.get(&var.id)
    }

    pub(crate) fn get_id(&self, id: VarId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }
}

pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
    next_id: VarId,
    recording: bool,
    bindings: Vec<(ParamId, VarId)>,
    kinks: Option<DefaultHasher>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), next_id: 0, recording: true, bindings: Vec::new(), kinks: None }
    }

    /// A tape that never records; intermediate values are freed as soon as
    /// the caller drops them.
    pub fn inference() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    /// Hashes the relu sign patterns and max-pool argmax indices of every
    /// forward, so callers can tell whether two evaluations took the same
    /// piecewise-linear branch.
    pub fn with_kink_fingerprint(mut self) -> Self {
        self.kinks = Some(DefaultHasher::new());
        self
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kinks.as_ref().map(Hasher::finish)
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn bindings(&self) -> &[(ParamId, VarId)] {
        &self.bindings
    }

    fn fresh(&mut self) -> VarId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let id = self.fresh();
        Var { id, value, tracked: requires_grad && self.recording }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; its gradient is collected by
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let p = store.get(id);
        let var = self.leaf_shared(Arc::clone(&p.value), p.kind.is_trainable());
        if var.tracked {
            self.bindings.push((id, var.id));
        }
        var
    }

    fn push(
        &mut self,
        op: &'static str,
        inputs: &[&Var<T>],
        output: Tensor<T>,
        saved: impl FnOnce(&Arc<Tensor<T>>) -> Saved<T>,
    ) -> Var<T> {
        let id = self.fresh();
        let value = Arc::new(output);
        let tracked = self.recording && inputs.iter().any(|v| v.tracked);
        if tracked {
            self.nodes.push(TapeNode {
                op,
                inputs: inputs.iter().map(|v| v.tracked.then_some(v.id)).collect(),
                output: id,
                saved: Some(saved(&value)),
            });
        }
        Var { id, value, tracked }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, params: ConvParams) -> Result<Var<T>> {
        let out = conv2d(&x.value, &w.value, b.map(|b| &*b.value), params)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let (xs, ws) = (Arc::clone(&x.value), Arc::clone(&w.value));
        Ok(self.push("conv2d", &inputs, out, |_| Saved::Conv { x: xs, w: ws, has_bias: b.is_some(), params }))
    }

    /// Batch normalization; returns the updated running statistics in training mode.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm2d(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        params: BatchNormParams,
    ) -> Result<(Var<T>, Option<(Tensor<T>, Tensor<T>)>)> {
        let out = batch_norm2d(&x.value, &gamma.value, &beta.value, running_mean, running_var, params)?;
        let gm = Arc::clone(&gamma.value);
        let (normalized, inv_std) = (out.normalized, out.inv_std);
        let var = self.push("batch_norm2d", &[x, gamma, beta], out.output, |_| Saved::BatchNorm {
            normalized,
            inv_std,
            gamma: gm,
            training: params.training,
        });
        Ok((var, out.running))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        // NaN maps to zero here, so the input is what gets validated.
        x.value.check_finite("relu")?;
        let out = relu(&x.value);
        if let Some(h) = &mut self.kinks {
            out.data().iter().for_each(|v| h.write_u8((*v > T::zero()) as u8));
        }
        Ok(self.push("relu", &[x], out, |v| Saved::Relu { out: Arc::clone(v) }))
    }

    pub fn max_pool2d(&mut self, x: &Var<T>, params: PoolParams) -> Result<Var<T>> {
        let out = max_pool2d(&x.value, params)?;
        if let Some(h) = &mut self.kinks {
            out.argmax.iter().for_each(|&i| h.write_usize(i));
        }
        let input_shape = x.shape().to_vec();
        Ok(self.push("max_pool2d", &[x], out.output, |_| Saved::MaxPool { input_shape, argmax: out.argmax }))
    }

    pub fn global_avg_pool2d(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = global_avg_pool2d(&x.value)?;
        let input_shape = x.shape().to_vec();
        Ok(self.push("global_avg_pool2d", &[x], out, |_| Saved::GlobalAvgPool { input_shape }))
    }

    pub fn bilinear_upsample(&mut self, x: &Var<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var<T>> {
        let out = bilinear_upsample(&x.value, out_h, out_w, align_corners)?;
        let input_shape = x.shape().to_vec();
        Ok(self.push("bilinear_upsample", &[x], out, |_| Saved::Bilinear { input_shape, align_corners }))
    }

    pub fn softmax(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = softmax_channelwise(&x.value)?;
        Ok(self.push("softmax", &[x], out, |v| Saved::Softmax { out: Arc::clone(v) }))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: &Var<T>, rate: f64, training: bool, rng: &mut R) -> Result<Var<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x.clone());
        }
        let mask = dropout_mask::<T, R>(x.value.numel(), rate, rng)?;
        let mut out = (*x.value).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        out.check_finite("dropout")?;
        Ok(self.push("dropout", &[x], out, |_| Saved::Dropout { mask }))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a
            .value
            .zip_map(&b.value, |x, y| x + y)
            .map_err(|_| Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())))?;
        out.check_finite("add")?;
        Ok(self.push("add", &[a, b], out, |_| Saved::Add))
    }

    pub fn concat(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &*v.value).collect();
        let out = Tensor::concat_channels(&tensors)?;
        let sizes = parts.iter().map(|v| v.shape()[1]).collect();
        Ok(self.push("concat", parts, out, |_| Saved::Concat { sizes }))
    }

    /// Mean per-pixel cross-entropy of `targets` (class indices, N*H*W).
    pub fn cross_entropy(&mut self, logits: &Var<T>, targets: &[u8]) -> Result<Var<T>> {
        let (loss, probs) = cross_entropy(&logits.value, targets)?;
        let targets: Arc<[u8]> = Arc::from(targets);
        Ok(self.push("cross_entropy", &[logits], Tensor::scalar(loss), |_| Saved::CrossEntropy { probs, targets }))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(x.value.sum());
        let shape = x.shape().to_vec();
        Ok(self.push("sum", &[x], out, |_| Saved::Sum { shape }))
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: &Var<T>, weights: &Tensor<T>) -> Result<Var<T>> {
        let prod = x.value.zip_map(weights, |a, b| a * b)?;
        let weights = Arc::new(weights.clone());
        Ok(self.push("weighted_sum", &[x], Tensor::scalar(prod.sum()), |_| Saved::WeightedSum { weights }))
    }

    /// Back-propagates from a scalar. Saved activations are released as each
    /// node is processed, so a tape supports a single backward pass.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        if !loss.tracked {
            return Err(Error::InvalidArgument("loss does not depend on any tracked value".into()));
        }
        let mut grads: HashMap<VarId, Tensor<T>> = HashMap::new();
        grads.insert(loss.id, Tensor::ones(loss.shape()));
        for node in self.nodes.iter_mut().rev() {
            let Some(g) = grads.remove(&node.output) else { continue };
            let saved = node.saved.take().ok_or(Error::MissingSaved { op: node.op })?;
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = saved.backward(&g, &needs)?;
            for (input, gi) in node.inputs.iter().zip(input_grads) {
                if let (Some(id), Some(gi)) = (input, gi) {
                    match grads.get_mut(id) {
                        Some(acc) => acc.add_assign(&gi)?,
                        None => {
                            grads.insert(*id, gi);
                        }
                    }
                }
            }
        }
        Ok(Gradients { map: grads })
    }
}
