//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are stored as `f64` internally. In the default 32-bit mode every
//! operation result is rounded through `f32`, matching single-precision
//! training; the thread-local "oracle mode" keeps full `f64` precision for
//! verification (finite-difference gradient checks, reference oracles).

pub mod engine;
pub mod kernels;
pub mod tape;

pub use engine::{Eager, Engine};
pub use tape::{Tape, Var};

use std::cell::Cell;
use std::collections::HashMap;

use crate::{PfError, Result};

thread_local! {
    static ORACLE_MODE: Cell<bool> = const { Cell::new(false) };
}

/// Enable or disable 64-bit oracle mode on the current thread.
pub fn set_oracle_mode(on: bool) {
    ORACLE_MODE.with(|m| m.set(on));
}

pub fn oracle_mode() -> bool {
    ORACLE_MODE.with(|m| m.get())
}

/// Round a freshly computed buffer through `f32` unless in oracle mode.
pub fn quantize(data: &mut [f64]) {
    if !oracle_mode() {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Dense row-major tensor, rank <= 4, last axis = channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(PfError::Dim(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(PfError::Dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }
}

/// Identifier of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named trainable weight and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered registry of all trainable parameters of a model.
///
/// Insertion order is the canonical enumeration order; it drives checkpoint
/// layout and optimizer state, so it must be deterministic for a fixed
/// configuration.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PfError::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Total element count over all parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.entries[id.0];
        debug_assert_eq!(p.grad.numel(), grad.len());
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn paramset_rejects_duplicate_names() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn zero_grad_clears_everything() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(&[3])).unwrap();
        ps.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        ps.zero_grad();
        assert!(ps.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_shape_matches_value_shape() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(&[2, 5])).unwrap();
        assert_eq!(ps.get(id).grad.shape(), ps.get(id).value.shape());
    }

    #[test]
    fn quantize_rounds_through_f32_by_default() {
        let x = 0.1f64 + 1e-12;
        let mut v = vec![x];
        quantize(&mut v);
        assert_eq!(v[0], x as f32 as f64);
        set_oracle_mode(true);
        let mut v = vec![x];
        quantize(&mut v);
        assert_eq!(v[0], x);
        set_oracle_mode(false);
    }
}
