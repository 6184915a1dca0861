//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::float::Float;
use crate::tensor::Tensor;

pub fn normal<F: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        F::of(v * std)
    })
}

pub fn uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| F::of(dist.sample(rng)))
}

/// Uniform in `±sqrt(6 / fan_in)` scaled by `gain`, the usual choice ahead
/// of rectifier-like activations.
pub fn kaiming_uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<F> {
    uniform(shape, gain * (3.0 / fan_in.max(1) as f64).sqrt(), rng)
}
