use std::collections::HashMap;
use std::sync::Arc;

use super::{Element, Gradients, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    /// Batch-norm running mean (a buffer: checkpointed, never trained).
    RunningMean,
    /// Batch-norm running variance (a buffer).
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Whether weight decay applies under the default policy.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight)
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Mutable access to the value; copies only if a tape still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

/// Ordered, uniquely named collection of parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, kind, value: Arc::new(value), grad: None });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Element count over trainable parameters (buffers excluded).
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind.is_trainable()).map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter bound on `tape` into `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) -> Result<()> {
        for &(pid, vid) in tape.bindings() {
            let Some(g) = grads.get_id(vid) else { continue };
            let p = &mut self.params[pid.0];
            match &mut p.grad {
                Some(acc) => acc.add_assign(g)?,
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", ParamKind::ConvWeight, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.weight", ParamKind::ConvWeight, Tensor::zeros(&[2])).is_err());
        assert_eq!(s.find("a.weight"), Some(ParamId(0)));
    }

    #[test]
    fn buffers_are_not_counted() {
        let mut s = ParamStore::<f32>::new();
        s.add("bn.weight", ParamKind::BnGamma, Tensor::zeros(&[4])).unwrap();
        s.add("bn.running_mean", ParamKind::RunningMean, Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.num_trainable(), 4);
    }
}
