use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// A learnable tensor with its gradient and SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    momentum: Tensor,
    frozen: bool,
    /// Elementwise clamp applied after every update.
    bounds: Option<(f64, f64)>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            momentum,
            frozen: false,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn momentum(&self) -> &Tensor {
        &self.momentum
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "gradient for `{}` has shape {:?}, expected {:?}",
                self.name,
                grad.shape(),
                self.value.shape()
            )));
        }
        self.grad = grad;
        Ok(())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &Tensor, &mut Tensor) {
        (&mut self.value, &self.grad, &mut self.momentum)
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) -> Result<()> {
        if self.index.contains_key(param.name()) {
            return Err(Error::config(format!("duplicate parameter `{}`", param.name())));
        }
        self.index.insert(param.name().to_string(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let i = self.position(name)?;
        Ok(&mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(name)?.value())
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub(crate) fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    /// Freezes every parameter, then unfreezes those matching `trainable`.
    pub fn freeze_all_except(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = !trainable(&p.name);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn reset_momentum(&mut self) {
        for p in &mut self.params {
            p.momentum = Tensor::zeros(p.value.shape());
        }
    }
}
