//! Deterministic random number generation.
//!
//! All randomness in the crate flows through [`DetRng`], a thin wrapper
//! over ChaCha8 with helpers for the distributions the experiments need.
//! Substreams are derived from a master seed with a counter-based split
//! ([`derive_seed`]) so that adding experiment cells never perturbs the
//! randomness of existing cells.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::fmath;

/// SplitMix64 finalizer. Bijective, well-mixed, stable across platforms.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for substream `stream` of `master`.
///
/// Counter-based: stream k is independent of whether streams k+1.. are
/// ever drawn.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)))
}

/// Deterministic seeded RNG used by every stochastic component.
#[derive(Clone, Debug)]
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Substream `stream` of `master`; see [`derive_seed`].
    pub fn substream(master: u64, stream: u64) -> Self {
        Self::from_seed(derive_seed(master, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    /// Gaussian sample via the Marsaglia polar method.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        loop {
            let u = 2.0 * self.unit_f64() - 1.0;
            let v = 2.0 * self.unit_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return mean + std * u * fmath::sqrt(-2.0 * fmath::ln(s) / s);
            }
        }
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Desk-scale n: modulo bias is ~n/2^64 and irrelevant here.
        (self.next_u64() % n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
