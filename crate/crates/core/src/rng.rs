//! Counter-based SplitMix64.
//!
//! Output `i` (1-based) of a generator with key `k` is
//! `mix64(k + i * 0x9E3779B97F4A7C15)` in wrapping arithmetic, where
//!
//! ```text
//! mix64(z):
//!   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!   z ^ (z >> 31)
//! ```
//!
//! This is the reference SplitMix64 sequence for seed `k`. Independent
//! streams are keyed by folding tags into the seed with
//! `k' = mix64(k ^ mix64(tag + 0x9E3779B97F4A7C15))`.
//!
//! Uniform doubles take the top 53 bits; normals use one Box-Muller
//! cosine branch per pair of uniforms, so every draw consumes exactly two
//! outputs.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Purpose tags for [`Rng::stream`].
pub mod tags {
    pub const INIT: u64 = 1;
    pub const LATENT: u64 = 2;
    pub const VIEW: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const RANDOM_EXCHANGE: u64 = 5;
    pub const FLOW: u64 = 6;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: seed, counter: 0 }
    }

    /// Generator keyed by `seed` and a path of tags.
    pub fn stream(seed: u64, path: &[u64]) -> Self {
        let key = path.iter().fold(seed, |k, &t| mix64(k ^ mix64(t.wrapping_add(GOLDEN_GAMMA))));
        Rng::new(key)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` by widening multiply.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates, walking from the last element down.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
