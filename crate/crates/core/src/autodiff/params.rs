use super::graph::{Graph, NodeId};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Ordered, uniquely named set of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::ConfigInvalid(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// Collects gradients of bound leaves; parameters the loss does not
    /// reach get zeros.
    pub fn grads(&self, g: &mut Graph<T>, ids: &[NodeId]) -> Vec<Tensor<T>> {
        ids.iter().zip(&self.tensors).map(|(&id, t)| g.take_grad(id).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
    }

    /// Replaces the values with those of `other`, which must have identical
    /// names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ShapeMismatch("parameter names differ".into()));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter_mut().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {name}: {:?} vs {:?}", a.shape(), b.shape())));
            }
            *a = b.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.to_f64()).collect()
    }
}
