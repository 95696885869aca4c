//! Seeded randomness.
//!
//! Every stream is a xoshiro256++ generator whose state is expanded from a
//! 64-bit seed with splitmix64, so a given seed produces the same sequence on
//! every platform. Normal deviates use the ziggurat sampler from `rand_distr`.

use crate::lie::Rotation;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Folds a slice of floats into a seed (bitwise, so equal inputs give equal seeds).
pub fn hash_f64s(seed: u64, values: &[f64]) -> u64 {
    values
        .iter()
        .fold(splitmix64(seed), |h, v| splitmix64(h ^ v.to_bits()))
}

/// Folds bytes into a seed.
pub fn hash_bytes(seed: u64, bytes: &[u8]) -> u64 {
    bytes
        .chunks(8)
        .fold(splitmix64(seed), |h, c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            splitmix64(h ^ u64::from_le_bytes(b) ^ (c.len() as u64) << 56)
        })
}

#[derive(Debug, Clone)]
pub struct SceneRng(Xoshiro256PlusPlus);

impl SceneRng {
    pub fn new(seed: u64) -> Self {
        SceneRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// Uniformly distributed rotation.
    pub fn rotation(&mut self) -> Rotation {
        loop {
            let q = [self.normal(), self.normal(), self.normal(), self.normal()];
            if let Ok(r) = Rotation::from_quaternion(q[0], q[1], q[2], q[3]) {
                return r;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
