//! Portable deterministic random streams.
//!
//! Every stream is a xoshiro256** generator seeded through splitmix64 from a
//! `(seed, domain, index)` triple, so values depend only on those inputs and
//! never on the host or on the order streams are created.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256StarStar};

pub struct Stream(Xoshiro256StarStar);

impl Stream {
    pub fn new(seed: u64, domain: u64, index: u64) -> Self {
        let mut mix = SplitMix64::seed_from_u64(seed);
        let a = mix.next_u64() ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut mix = SplitMix64::seed_from_u64(a);
        let b = mix.next_u64() ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
        Stream(Xoshiro256StarStar::seed_from_u64(b))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution, exact in f32.
    pub fn unit_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + self.unit_f32() * (hi - lo)
    }

    /// Uniform in `[0, n)`; `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        // Lemire's multiply-shift; the tiny bias is irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}
