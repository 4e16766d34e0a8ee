//! Seeded deterministic randomness.
//!
//! One ChaCha8 stream per concern (init, dropout, shuffling, task noise),
//! derived from a root seed, so adding draws in one place never shifts the
//! streams of another.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::math;

/// Deterministic RNG used throughout the crate.
#[derive(Clone, Debug)]
pub struct Trng {
    rng: ChaCha8Rng,
}

impl Trng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream. SplitMix64 over (seed, stream)
    /// keeps children decorrelated even for adjacent stream ids.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::seed_from(mix(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11).max(1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform01();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * math::PI * u2)
    }

    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        std * self.normal()
    }

    pub fn fill_normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal_scaled(std)).collect()
    }

    /// Uniform integer in [0, n). Modulo bias is negligible for our n.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer over the pair.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
