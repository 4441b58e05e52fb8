//! Reproducible, label-derived random streams.
//!
//! A stream is keyed by (master seed, label tuple). The key derivation hashes
//! the length-prefixed labels with SHA-256 into a ChaCha12 seed, so streams
//! with different labels are statistically independent while identical labels
//! reproduce the stream exactly, independent of platform and thread schedule.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// A reproducible random stream derived from a master seed and labels.
pub struct RngStream {
    rng: ChaCha12Rng,
}

impl RngStream {
    /// Derive a stream from `(master_seed, labels...)`.
    ///
    /// Each label is encoded as `len_le_u64 || bytes`, so label tuples are
    /// unambiguous: ("ab","c") and ("a","bc") derive different keys.
    pub fn derive(master_seed: u64, labels: &[&str]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        for label in labels {
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Self { rng: ChaCha12Rng::from_seed(seed) }
    }

    /// A child stream with an extra label, for splitting work within a cell.
    pub fn child(&self, label: &str) -> Self {
        // derive from the parent's current key material: hash its next block
        let mut clone = ChaCha12Rng::from_seed({
            let mut hasher = Sha256::new();
            hasher.update(b"child");
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
            let mut probe = self.rng.clone();
            let mut block = [0u8; 32];
            probe.fill_bytes(&mut block);
            hasher.update(block);
            let digest = hasher.finalize();
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest);
            seed
        });
        // decouple the child from the parent's stream position
        clone.set_stream(1);
        Self { rng: clone }
    }

    pub fn uniform(&mut self) -> f64 {
        // 53-bit uniform in [0, 1)
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    pub fn exponential(&mut self) -> f64 {
        // inverse-cdf; uniform() < 1 so the log argument is positive
        -(1.0 - self.uniform()).ln()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // rejection to avoid modulo bias
        let zone = u64::MAX - (u64::MAX % n as u64);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n as u64) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from 0..n (partial Fisher–Yates), sorted.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut out = idx[..k].to_vec();
        out.sort_unstable();
        out
    }
}

/// Spec-facing constructor: derive a stream from a master seed and labels.
pub fn seed_stream(master_seed: u64, labels: &[&str]) -> RngStream {
    RngStream::derive(master_seed, labels)
}
