//! Seeded, counter-based random source with labelled substreams.
//!
//! A stream is keyed by `(seed, label)`: the seed selects the ChaCha key and
//! the label selects the ChaCha stream id, so initialisation, masking and
//! data generation draw from independent sequences that do not shift when
//! one of them consumes more values.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(label.as_bytes()));
        Self {
            seed,
            label: label.to_owned(),
            inner,
        }
    }

    /// Independent stream keyed by the same seed and `"{label}/{child}"`.
    pub fn substream(&self, child: &str) -> Self {
        Self::new(self.seed, &format!("{}/{child}", self.label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    /// `m` distinct indices drawn uniformly from `0..n`, returned ascending.
    pub fn sample_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.inner, n, m).into_vec();
        idx.sort_unstable();
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
