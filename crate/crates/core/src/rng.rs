//! The one generator used for every seeded quantity in the crate.
//!
//! SplitMix64 (Steele, Lea & Flood): state += 0x9E3779B97F4A7C15, then the
//! output is the state passed through the `mix64` finalizer
//! (xor-shift 30, multiply 0xBF58476D1CE4E5B9, xor-shift 27,
//! multiply 0x94D049BB133111EB, xor-shift 31). Floats take the top bits of
//! one output: `f32` uses 24 bits, `f64` uses 53 bits, both in [0, 1).
//!
//! Independent streams are derived with [`SeededRng::derive`], so a sample's
//! inputs don't depend on how many other samples were drawn before it.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct SeededRng(SplitMix64);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    /// Child generator keyed by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut parent = Self::new(seed ^ stream.wrapping_mul(GOLDEN));
        Self::new(parent.next_u64())
    }

    /// Child keyed by several stream words, folded left to right.
    pub fn derive_path(seed: u64, path: &[u64]) -> Self {
        let mut s = seed;
        for &p in path {
            s = Self::derive(s, p).next_u64();
        }
        Self::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `0..n`. Slight modulo bias is irrelevant at our ranges.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.next_u64() % n
    }
}
