//! Seeded random streams.
//!
//! Backed by ChaCha8 (a counter-based stream cipher generator), so a given
//! `(seed, stream)` pair produces the same sequence on every platform.
//! Normal deviates use the Box–Muller transform; the second value of each
//! pair is cached and returned by the next call.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` under `seed`, for concurrent consumers.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Derives a fresh generator from this one's output.
    pub fn fork(&mut self) -> Self {
        Self::seed(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Draws an index with probability proportional to `weights` by
    /// inverse-CDF lookup. Zero-weight entries are never chosen.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last_positive = i;
            acc += w;
            if target < acc {
                return i;
            }
        }
        last_positive
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn sample_standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let a = sample_standard_normal(&mut Rng::seed(42), 100);
        let b = sample_standard_normal(&mut Rng::seed(42), 100);
        assert_eq!(a, b);
        let c = sample_standard_normal(&mut Rng::seed(43), 100);
        assert_ne!(a, c);
    }

    #[test]
    fn streams_differ() {
        let a = sample_standard_normal(&mut Rng::stream(7, 0), 8);
        let b = sample_standard_normal(&mut Rng::stream(7, 1), 8);
        assert_ne!(a, b);
    }

    #[test]
    fn moments_within_bounds() {
        let n = 100_000;
        let xs = sample_standard_normal(&mut Rng::seed(2024), n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn zero_draws() {
        assert!(sample_standard_normal(&mut Rng::seed(1), 0).is_empty());
    }

    #[test]
    fn categorical_skips_zero_weights() {
        let mut rng = Rng::seed(3);
        for _ in 0..10_000 {
            assert_ne!(rng.categorical(&[0.5, 0.0, 0.5]), 1);
        }
    }

    #[test]
    fn uniform_range() {
        let mut rng = Rng::seed(9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
