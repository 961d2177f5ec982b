//! Seeded parameter initialisers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor4;

/// Uniform values in `[-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(shape: [usize; 4], bound: f64, rng: &mut R) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-bound..bound))
}

pub fn uniform_seeded(shape: [usize; 4], bound: f64, seed: u64) -> Tensor4 {
    uniform(shape, bound, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Zero-mean Gaussian with standard deviation `std`.
pub fn normal<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Tensor4 {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor4::from_fn(shape, |_, _, _, _| d.sample(rng))
}

/// He-normal initialisation for a weight whose fan-in is `in × kh × kw`.
pub fn kaiming<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor4 {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    normal(shape, (2.0 / fan_in).sqrt(), rng)
}
