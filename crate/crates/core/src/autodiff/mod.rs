//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A define-by-run tape: every forward op appends a node, `backward` walks
//! the nodes in reverse and accumulates gradients into a [`ParamSet`].
//! The tape is rebuilt on every forward pass, which keeps branching graphs
//! (MIMO members, two-stage MixUp forwards) trivial to express.

mod check;
mod tape;

pub use check::{finite_difference_check, grad_check};
pub use tape::{Tape, TensorId};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense multi-dimensional array, row-major, double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Gaussian init, the standard transformer weight initialization.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Trainable tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Named collection of model parameters.
///
/// Gradients accumulate additively across backward passes until
/// [`ParamSet::zero_grad`] is called.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_with(name, value, true)
    }

    pub fn add_with(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        let grad = vec![0.0; value.numel()];
        self.entries.push(Parameter { name, value, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.entries[id.0];
        debug_assert_eq!(p.grad.len(), grad.len());
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match data length")]
    fn tensor_shape_mismatch_panics() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn paramset_grads_start_zero_and_reset() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(vec![2, 2]));
        ps.accumulate_grad(id, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ps.get(id).grad, vec![1.0, 2.0, 3.0, 4.0]);
        ps.zero_grad();
        assert!(ps.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_param_name_panics() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(vec![1]));
        ps.add("w", Tensor::zeros(vec![1]));
    }
}
