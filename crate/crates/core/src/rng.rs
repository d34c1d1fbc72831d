//! Deterministic pseudorandom source.
//!
//! The stream is ChaCha8 keyed from the 64-bit seed through
//! `SeedableRng::seed_from_u64`; both are specified algorithms with no
//! platform-dependent state, so one seed yields one stream everywhere.
//! Gaussian draws use `rand_distr::StandardNormal`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, derived from this generator's seed and `stream`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut child = ChaCha8Rng::seed_from_u64(self.seed);
        child.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner: child,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
