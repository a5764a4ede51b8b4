//! The pinned seeded generator used everywhere randomness affects output.
//!
//! ChaCha20 keyed by `SHA-256("transfer-curate/seed" || seed_le)`, with a
//! 64-bit stream id per purpose. Being counter-based, any stream can be
//! reproduced independently (per crop, per procedure) without sharing state.
//! Bounded integers use rejection sampling and floats take the top 53 bits,
//! so results never depend on a third-party sampling algorithm.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// Recorded in manifests next to the seed.
pub const GENERATOR_ID: &str = "chacha20-sha256key-v1";

pub const STREAM_DROP_ORDER: u64 = 1;
pub const STREAM_RANDOM_SELECT: u64 = 2;
pub const STREAM_FIXTURE: u64 = 3;

pub struct SeededRng(ChaCha20Rng);

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"transfer-curate/seed");
        h.update(seed.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(stream);
        SeededRng(rng)
    }

    /// Stream derived from a byte key, e.g. `(source_image_id, crop_index)`.
    pub fn keyed(seed: u64, domain: &str, key: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update([0u8]);
        h.update(key);
        let digest = h.finalize();
        let stream = u64::from_le_bytes(digest[..8].try_into().unwrap());
        Self::new(seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// A seeded permutation of `0..n`.
pub fn permutation(seed: u64, stream: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    SeededRng::new(seed, stream).shuffle(&mut p);
    p
}
