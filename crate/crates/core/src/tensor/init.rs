//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{numel, Scalar, Tensor};

/// Normal(0, std) resampled until within two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..numel(shape))
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn uniform<T: Scalar, R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| T::of(rng.gen_range(lo..hi)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
