use indexmap::IndexMap;

use crate::error::{shape_err, NdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of parameters with gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NdError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name,
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|k, _| !k.starts_with(prefix));
        before - self.params.len()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return shape_err(
                "set_value",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            );
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar values, trainable or not.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return shape_err(
                "accumulate_grad",
                format!("{name}: {:?} vs {:?}", p.grad.shape(), grad.shape()),
            );
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.round_to_f32();
        }
    }
}
