use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Model parameters θ.
pub type ParameterStore = NamedTensors;

/// ∂loss/∂θ, keyed like the [`ParameterStore`] it was computed from.
pub type GradientMap = NamedTensors;

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Names are unique; re-inserting replaces the value
    /// only if the shape is unchanged.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => {
                if self.values[i].shape() != value.shape() {
                    return Err(Error::shape(
                        "insert",
                        self.values[i].shape(),
                        value.shape(),
                    ));
                }
                self.values[i] = value;
            }
            None => {
                self.names.push(name);
                self.values.push(value);
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
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

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn value_at(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn value_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Same keys and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Checks that `other` has exactly the same keys, in the same order, with
    /// the same shapes.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        for (name, value) in self.iter() {
            let theirs = other
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if theirs.shape() != value.shape() {
                return Err(Error::shape("layout", value.shape(), theirs.shape()));
            }
        }
        if other.len() != self.len() {
            let extra = other
                .names
                .iter()
                .find(|n| self.index_of(n).is_none())
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnknownParameter(extra));
        }
        Ok(())
    }

    /// `self += scale * other`, key by key.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.check_same_layout(other)?;
        for i in 0..self.len() {
            let theirs = other.require(&self.names[i])?;
            self.values[i].axpy(scale, theirs)?;
        }
        Ok(())
    }

    /// Largest absolute entry over all tensors; 0 when empty.
    pub fn abs_max(&self) -> f64 {
        self.values
            .iter()
            .fold(0.0, |m, t| f64::max(m, t.abs_max()))
    }

    /// Inner product over all entries, keys matched by name.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_layout(other)?;
        let mut acc = 0.0;
        for (name, value) in self.iter() {
            let theirs = other.require(name)?;
            acc += value
                .data()
                .iter()
                .zip(theirs.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok(acc)
    }
}

/// Plain gradient descent: θ ← θ − β·∇θ.
pub fn sgd_step(params: &mut ParameterStore, grads: &GradientMap, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("learning rate must be positive and finite"));
    }
    params.check_same_layout(grads)?;
    for i in 0..params.len() {
        let g = grads.require(&params.names[i])?;
        params.values[i].axpy(-lr, g)?;
    }
    params.values.iter().try_for_each(Tensor::validate)
}
