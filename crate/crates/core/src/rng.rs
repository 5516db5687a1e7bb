//! Counter-based random streams.
//!
//! Every stream is identified by `(seed, stream_id)` and its output depends
//! only on that pair and the position (counter) inside the stream. This lets
//! augmentation and dropout draw from per-sample or per-step streams without
//! caring about the order in which samples are processed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

/// Folds several integers into a single stream id.
pub fn stream_key(parts: &[u64]) -> u64 {
    // splitmix64 finalizer applied to a running combination
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// A fresh stream sharing this generator's seed.
    pub fn derive(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Position in the stream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_counter(&mut self, counter: u128) {
        self.inner.set_word_pos(counter);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_keys_give_equal_streams() {
        let mut a = Rng::new(7, 3);
        let mut b = Rng::new(7, 3);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn output_depends_only_on_counter() {
        let mut a = Rng::new(11, 5);
        for _ in 0..37 {
            a.next_u64();
        }
        let pos = a.counter();
        let expected = a.next_u64();
        let mut b = Rng::new(11, 5);
        b.set_counter(pos);
        assert_eq!(b.next_u64(), expected);
    }

    #[test]
    fn distinct_streams_differ_and_look_uncorrelated() {
        let mut a = Rng::new(1, 0);
        let mut b = Rng::new(1, 1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.uniform() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.uniform() - 0.5).collect();
        assert_ne!(xs[..8], ys[..8]);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // var of U(-.5,.5) is 1/12; correlation well under 4 sigma (~0.028)
        assert!((cov * 12.0).abs() < 0.03, "correlation {}", cov * 12.0);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // frozen so that a dependency bump that changes the stream is noticed
        let first = Rng::new(42, 0).next_u64();
        assert_eq!(first, 12_578_764_544_318_200_737);
        assert_ne!(first, Rng::new(42, 1).next_u64());
    }

    #[test]
    fn stream_key_separates_orderings() {
        assert_ne!(stream_key(&[1, 2]), stream_key(&[2, 1]));
        assert_eq!(stream_key(&[3, 4]), stream_key(&[3, 4]));
    }
}
