use std::collections::BTreeMap;

use super::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer grouping. Every parameter belongs to exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Semantic,
    Scorer,
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count per optimizer group.
    pub fn group_sizes(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for (g, t) in self.groups.iter().zip(&self.tensors) {
            *out.entry(*g).or_insert(0) += t.len();
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient buffers congruent with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            bufs: params
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        super::kernels::add_into(grad, &mut self.bufs[id.0]);
    }

    /// Adds `other` in place. Used for the fixed-order batch reduction.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            super::kernels::add_into(b, a);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for buf in &mut self.bufs {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn clear(&mut self) {
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// First parameter holding a non-finite gradient, if any.
    pub fn check_finite(&self, params: &ParamSet<T>) -> Result<(), TensorError> {
        for (i, buf) in self.bufs.iter().enumerate() {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    name: params.names[i].clone(),
                });
            }
        }
        Ok(())
    }
}
