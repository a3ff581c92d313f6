//! Seeded random numbers for weight initialization.
//!
//! Normal samples come from a hand-rolled Box–Muller transform over the
//! ChaCha8 stream so that initialization bytes depend only on the seed,
//! not on a distribution crate's sampling internals.

use crate::tensor::Real;
use rand_core::{RngCore, SeedableRng};

pub struct SeededRng(rand_chacha::ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    }

    /// Standard normal draw (Box–Muller).
    pub fn normal(&mut self) -> f64 {
        #[cfg(not(feature = "std"))]
        use num_traits::Float as _;
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
    }

    /// Normal draw scaled by `std`, cast to the target element type.
    pub fn normal_scaled<T: Real>(&mut self, std: f64) -> T {
        T::fr(self.normal() * std)
    }
}

/// Mix a seed with stream labels (epoch, index) into a fresh sub-seed.
/// SplitMix64 finalizer; good enough to decorrelate neighbouring streams.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
