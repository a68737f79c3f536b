//! Parameter initializers. All draw from a caller-owned RNG so a model built
//! from the same seed is bitwise reproducible.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Scalar, Tensor};

/// He (Kaiming) normal init: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, shape, std)
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("element count matches shape")
}

/// Normal truncated to two standard deviations by resampling.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("element count matches shape")
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec())
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape.to_vec(), T::one())
}
