//! Seeded parameter initialization and sub-seed derivation.
//!
//! All randomness in the crate flows from one configured seed. Every
//! component derives its own stream by hashing a name into the seed, so
//! adding or reordering components never perturbs the draws of another.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tensor};

/// Deterministic RNG for a named component under a base seed.
pub fn sub_rng(base_seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Weight matrix drawn from uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
///
/// Weights are stored `out_features x in_features`, so `fan_in` is the
/// column count.
pub fn uniform_fan_in<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (1.0 / cols as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_raw(rows, cols, data)
}

/// Bias vector initialized to zeros (`1 x n`).
pub fn zeros_bias<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(1, n)
}
