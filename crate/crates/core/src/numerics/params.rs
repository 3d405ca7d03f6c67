use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Position of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named learnable tensors, each paired with a gradient buffer of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    /// Replaces a parameter's value. The shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// `(id, name)` pairs sorted by name.
    pub fn sorted(&self) -> impl Iterator<Item = (ParamId, &str)> {
        self.index.iter().map(|(n, id)| (*id, n.as_str()))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Per-parameter gradients produced by one backward pass. `None` means the
/// parameter did not take part in the forward pass.
#[derive(Clone, Debug)]
pub struct Gradients(pub(crate) Vec<Option<Tensor>>);

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        self.0[id.0] = Some(grad);
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: &[f64], shape: &[usize]) {
        let slot = self.0[id.0].get_or_insert_with(|| Tensor::zeros(shape));
        for (a, b) in slot.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
    }

    /// Sums another gradient set into this one.
    pub fn merge(&mut self, other: &Gradients) {
        for (slot, g) in self.0.iter_mut().zip(&other.0) {
            if let Some(g) = g {
                match slot {
                    Some(s) => {
                        for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_buffers_match_shapes_and_reset() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::filled(&[2, 3], 1.0)).unwrap();
        let b = store.insert("b", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(store.grad(a).shape(), &[2, 3]);
        assert_eq!(store.grad(b).shape(), &[2]);

        let mut g = Gradients::new(store.len());
        g.set(a, Tensor::filled(&[2, 3], 0.5));
        store.accumulate(&g);
        store.accumulate(&g);
        assert!(store.grad(a).data().iter().all(|&x| x == 1.0));
        store.zero_grads();
        assert!(store.grad(a).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_and_unknown_names() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            store.insert("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(store.id("nope"), Err(Error::UnknownParam(_))));
        assert!(store.set("w", Tensor::vector(vec![1.0, 2.0])).is_err());
    }
}
