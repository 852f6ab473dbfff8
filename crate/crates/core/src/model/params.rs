use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameters in a fixed declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    /// Replaces a parameter with a trainable copy of `data`; the shape must match.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        self.replace(i, data)
    }

    /// Swaps in `tensor` itself, keeping its identity in any graph built later.
    pub fn substitute(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if tensor.shape() != self.tensors[i].shape() {
            return Err(Error::shape(format!("substitute {name}"), &[self.tensors[i].shape(), tensor.shape()]));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn replace(&mut self, i: usize, data: Vec<f64>) -> Result<()> {
        let old = &self.tensors[i];
        if data.len() != old.numel() {
            return Err(Error::shape(
                format!("set {}", self.names[i]),
                &[old.shape(), &[data.len()]],
            ));
        }
        self.tensors[i] = Tensor::param(old.shape(), data)?;
        Ok(())
    }

    /// Constant views of every parameter; forward passes over them build no graph.
    pub fn detached(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zero_grad(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }

    /// Gradient of each parameter, zeros where none was populated.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}
