//! Versioned random stream shared by every generator and sampler.
//!
//! The stream is ChaCha8 keyed by a 64-bit seed, with a 64-bit stream id
//! selecting an independent keystream (one per purpose: data, warm start,
//! interest set, oracle, ...). Transforms are fixed and documented so that
//! another implementation can reproduce the exact same draws:
//!
//! * `uniform()`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()`: Box-Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`,
//!   consuming two uniforms per draw (the sine branch is discarded).
//! * `index(n)`: `floor(uniform() * n)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const RNG_VERSION: &str = "chacha8-boxmuller-v1";

/// Stream ids for the purposes the harness draws from.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const WARM_START: u64 = 2;
    pub const INTEREST: u64 = 3;
    pub const ORACLE: u64 = 4;
    pub const ACQUISITION: u64 = 5;
    pub const ESTIMATOR: u64 = 6;
    pub const TARGET: u64 = 7;
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    inner: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// A child stream derived from this one, for nested consumers that must
    /// not perturb the parent's sequence.
    pub fn fork(&mut self, stream: u64) -> Self {
        Self::new(self.inner.next_u64(), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Draws `k` distinct indices from `0..n` (partial Fisher-Yates).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut items: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.index(n - i);
            items.swap(i, j);
        }
        items.truncate(k);
        items
    }

    /// Draws an index with probability proportional to `weights`.
    /// Returns `None` when the weights sum to zero or are not finite.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return None;
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return Some(i);
            }
        }
        weights.iter().rposition(|w| *w > 0.0)
    }
}
