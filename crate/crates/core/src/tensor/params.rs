use std::collections::BTreeMap;

use super::{Tensor, TensorError};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Adam first and second moments, created lazily by the optimizer.
    pub moments: Option<(Tensor, Tensor)>,
}

/// Named parameters in deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad, trainable, moments: None });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(super::shape_err("set_value", format!("{:?} vs {:?}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), TensorError> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    /// Total scalar count.
    pub fn n_params(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn n_trainable(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), TensorError> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.trainable {
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Drops optimizer moments (they are not persisted).
    pub fn clear_moments(&mut self) {
        for p in self.params.values_mut() {
            p.moments = None;
        }
    }

    /// Hash of names, shapes, trainable flags and value bits.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (name, p) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for d in p.value.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            bytes.push(p.trainable as u8);
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        rng::fingerprint(&bytes)
    }
}
