use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

/// Normal samples with standard deviation `std`, redrawn outside ±2σ.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("std is positive");
    let data: Vec<T> = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
