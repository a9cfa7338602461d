use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// An ordered, named collection of parameter tensors.
///
/// Iteration order is insertion order, which keeps optimizer state,
/// gradient lists, and checkpoint tables aligned without extra
/// bookkeeping.
#[derive(Clone, Default)]
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidAttr {
                op: "param_set",
                detail: format!("duplicate parameter name {name}"),
            });
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    /// Replaces an existing tensor, keeping name and position.
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                if self.tensors[i].shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "param_set",
                        detail: format!(
                            "{name}: {:?} vs {:?}",
                            self.tensors[i].shape(),
                            tensor.shape()
                        ),
                    });
                }
                self.tensors[i] = tensor;
                Ok(())
            }
            None => Err(Error::TargetMissing { name: name.to_string() }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Marks every tensor as requiring gradients (or not).
    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for t in &mut self.tensors {
            *t = t.clone().with_requires_grad(requires_grad);
        }
    }

    /// True when both sets have identical names, shapes, and bits.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}
