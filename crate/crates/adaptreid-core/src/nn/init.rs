//! Seeded parameter initialization: zero-mean Gaussian with a fixed standard
//! deviation, biases at zero.

use crate::nn::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const WEIGHT_STD: f64 = 0.02;

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect())
}
