use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed declaration order.
///
/// The order is part of the checkpoint format: blocks are written and read
/// back in exactly this sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform matrix (or higher-rank kernel, with fan-in taken as
    /// the product of all but the last axis).
    pub fn add_glorot<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        let fan_out = *shape.last().expect("shape");
        let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), values).expect("param shape"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
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

    pub fn tensors(&self) -> impl ExactSizeIterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub(crate) fn values_mut(&mut self, i: usize) -> &mut Vec<f64> {
        self.tensors[i].values_mut()
    }

    /// Flat address of scalar `offset` in parameter `i`, for perturbation
    /// tests and finite-difference checks.
    pub fn set_scalar(&mut self, i: usize, offset: usize, value: f64) {
        self.values_mut(i)[offset] = value;
    }

    /// Overwrites values from `other`, which must have identical names and
    /// shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::format("parameter names differ from the declared layout"));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::format(format!(
                    "parameter shape {:?} does not match layout {:?}",
                    theirs.shape(),
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}
