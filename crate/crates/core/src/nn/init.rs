use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Parameter, Tensor};

pub(crate) type InitRng = ChaCha8Rng;

pub(crate) fn rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`, which keeps activation
/// variance roughly constant through relu layers.
pub(crate) fn fan_in(name: String, shape: &[usize], fan_in: usize, rng: &mut InitRng) -> Parameter {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Parameter::new(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
}

pub(crate) fn normal(name: String, shape: &[usize], std: f64, rng: &mut InitRng) -> Parameter {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Parameter::new(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
}

pub(crate) fn zeros(name: String, shape: &[usize]) -> Parameter {
    Parameter::new(name, Tensor::zeros(shape))
}

pub(crate) fn ones(name: String, shape: &[usize]) -> Parameter {
    Parameter::new(name, Tensor::full(shape, 1.0))
}
