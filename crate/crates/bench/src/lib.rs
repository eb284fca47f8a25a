//! Shared fixtures for the criterion benches.

use rand::Rng;
use voltcast_core::tensor::{seeded_rng, Tensor};

/// An `l × d` matrix of uniform values in `[-2, 2)`.
pub fn random_input(l: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::matrix(l, d, (0..l * d).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// `count` flattened windows of `len` values each.
pub fn random_windows(count: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}
