//! Deterministic, platform-independent random streams.
//!
//! Every source of randomness in the crate goes through [`RngStream`], a
//! counter-tracked ChaCha8 generator. A stream is addressed by its seed plus a
//! substream path, so independent consumers (per-sample augmentations, layer
//! initialisation, shuffles) never share draws regardless of evaluation order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Labels for substream derivation. Keeping them in one place avoids
/// accidental collisions between consumers.
pub mod tags {
    pub const AUGMENT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const CLASSIFIER: u64 = 7;
}

/// A seeded draw stream with an explicit draw counter.
///
/// Identical `(seed, path)` always yields the identical sequence of draws on
/// every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    counter: u64,
}

/// splitmix64 finalizer; used to fold substream paths into child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counter: 0,
        }
    }

    /// Derive an independent child stream from a path of identifiers.
    pub fn substream(&self, path: &[u64]) -> Self {
        let mut s = mix(self.seed);
        for &p in path {
            s = mix(s ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        Self::new(s)
    }

    /// Seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of primitive draws taken so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller; always consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Draw `k` distinct indices from [0, n) by partial Fisher-Yates.
    /// The result is in selection order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.uniform_int((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 100);
    }

    #[test]
    fn substreams_are_independent_of_parent_state() {
        let mut a = RngStream::new(7);
        let before = a.substream(&[1, 2]);
        a.next_u64();
        let after = a.substream(&[1, 2]);
        let mut x = before.clone();
        let mut y = after.clone();
        assert_eq!(x.next_u64(), y.next_u64());
    }

    #[test]
    fn distinct_paths_differ() {
        let root = RngStream::new(7);
        let mut a = root.substream(&[1]);
        let mut b = root.substream(&[2]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_int_in_range() {
        let mut r = RngStream::new(3);
        for _ in 0..1000 {
            assert!(r.uniform_int(5) < 5);
        }
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut r = RngStream::new(9);
        let picks = r.choose_distinct(30, 10);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }
}
