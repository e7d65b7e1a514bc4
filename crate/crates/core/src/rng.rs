//! Seeded randomness.
//!
//! Every stochastic routine in the crate draws from [`Rng`], a thin wrapper
//! around ChaCha8 (the 8-round ChaCha stream cipher used as a counter-based
//! generator, as implemented by `rand_chacha`). A 64-bit seed is expanded to
//! the 256-bit ChaCha key with the PCG32 procedure of
//! `rand_core::SeedableRng::seed_from_u64`, so a given seed yields the same
//! stream on every platform.
//!
//! Parallel work never shares a generator. Independent streams are derived
//! with [`Rng::derive_seed`], which mixes a parent seed with a stream index
//! through SplitMix64 finalizers.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed of child stream `stream` under `parent`. Distinct `(parent, stream)`
    /// pairs map to well-separated seeds.
    pub fn derive_seed(parent: u64, stream: u64) -> u64 {
        splitmix64(splitmix64(parent) ^ splitmix64(stream.wrapping_mul(GOLDEN).wrapping_add(1)))
    }

    /// Independent generator for stream `stream` of this generator's seed.
    pub fn stream(&self, stream: u64) -> Rng {
        Rng::new(Self::derive_seed(self.seed, stream))
    }

    /// Generator for a path of nested stream indices.
    pub fn substream(seed: u64, path: &[u64]) -> Rng {
        Rng::new(path.iter().fold(seed, |s, &i| Self::derive_seed(s, i)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `[low, high)`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive and finite")
            .sample(&mut self.inner)
    }

    /// Index drawn from `probs` by inverse CDF with a single uniform draw.
    /// Mass lost to rounding falls on the last index with positive probability.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
