//! Seeded, fully deterministic randomness.
//!
//! Every stochastic step in the lab (corpus sampling, weight init, minibatch
//! shuffling) draws from [`SeededRng`], so a run is pinned by its seeds alone.
//! The generator is SplitMix64: a 64-bit counter scrambled by two xor-shift
//! multiplies. It is small, has a full 2^64 period over its state, and its
//! integer stream is bit-identical on every platform.
//!
//! Standard-normal variates use the Box–Muller transform: with `u1 ∈ (0, 1]`
//! and `u2 ∈ [0, 1)`,
//!
//! ```text
//! r = sqrt(-2 ln u1)
//! z0 = r cos(2π u2),  z1 = r sin(2π u2)
//! ```
//!
//! Both variates are consumed (the second is cached), so the mapping from
//! seed to normal stream is fixed and documented here rather than borrowed
//! from a library whose sampling algorithm may change between releases.

/// Deterministic pseudo-random generator (SplitMix64 + Box–Muller normals).
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Next 64 uniform bits.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard-normal variate.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 is shifted into (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `n` standard-normal variates.
    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    /// Uniform index in `[0, bound)`. `bound` must be nonzero.
    ///
    /// Plain modulo: the bias is O(bound / 2^64), invisible at the corpus
    /// sizes this lab works with, and the branch-free form keeps the call
    /// sequence trivially reproducible.
    pub fn index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "index bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
