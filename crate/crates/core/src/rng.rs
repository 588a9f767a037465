//! Seeded, counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by a base
//! seed plus a path of stream indices, so a given (seed, path) always yields the
//! same numbers regardless of what else ran before it.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed from `seed` and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut s = seed;
    for &p in path {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(p.wrapping_add(1));
        s = r.random();
    }
    s
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(seed, path))
}

pub fn normal_vec(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(n, std, rng)).expect("valid shape")
}

/// Uniform in `[0, 1)`.
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}
