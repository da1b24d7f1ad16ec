//! Portable seeded randomness.
//!
//! Everything random in the toolkit (parameter init, corpus generation,
//! bootstrap resampling) goes through [`PortableRng`]: xoshiro256** seeded
//! through SplitMix64, with integer and float draws defined by plain
//! arithmetic so that ports in other languages can reproduce the streams
//! bit for bit.
//!
//! * `next_u64`: xoshiro256** output.
//! * `below(n)`: `((next_u64() as u128 * n as u128) >> 64) as u64`.
//! * `unit_f64()`: `(next_u64() >> 11) * 2^-53`.
//! * `stream(seed, k)`: a fresh generator seeded with
//!   `seed ^ splitmix64(k + 1)`, so that independent consumers of one seed
//!   never share a stream.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct PortableRng {
    inner: Xoshiro256StarStar,
}

/// One step of SplitMix64 applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PortableRng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream `k` of `seed`.
    pub fn stream(seed: u64, k: u64) -> Self {
        Self::seed(seed ^ splitmix64(k.wrapping_add(1)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (one value per call, the sine branch is discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit_f64();
        let u2 = self.unit_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle driven by [`Self::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
