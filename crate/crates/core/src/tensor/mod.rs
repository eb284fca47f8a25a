//! Dense f64 tensors and a single-use reverse-mode tape.
//!
//! Values are immutable once created; a [`Tensor`] clone shares its buffer.
//! Gradients live on the [`Tape`] that recorded the computation, never on
//! the tensor itself, so frozen parameter sets can be read from many
//! threads while each thread records its own tape.

mod optim;
mod params;
pub(crate) mod tape;

pub use optim::{Adam, AdamConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};

use std::sync::Arc;

use rand::SeedableRng;

use crate::error::{Error, Result};

/// The one RNG type used for initialization, dropout and shuffling.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dimension("tensor", &shape, &[values.len()]));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dimension("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(values),
        })
    }

    /// Row-major 2-D tensor. Panics if `values.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix extents");
        Tensor::new(vec![rows, cols], values).expect("non-empty matrix")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("valid zero tensor")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("valid tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::new(vec![n], values).expect("non-empty vector")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::usage("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Interprets the tensor as a matrix: all leading axes fold into rows.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(Error::dimension("matrix view", other, &[0, 0])),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::dimension("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Copy-on-write access used by optimizers; clones only if a tape
    /// still holds the buffer.
    pub(crate) fn values_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }
}
