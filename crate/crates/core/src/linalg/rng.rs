//! Deterministic seeded randomness.
//!
//! Everything random in a story world flows from one 64-bit seed through
//! named ChaCha8 streams, one per consumer (basis pool, shared B, generator
//! weights, dataset noise, render noise, ...). Identical seeds reproduce
//! identical worlds byte for byte.

use crate::linalg::Matrix;
use crate::scalar::Scalar;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// FNV-1a over the stream label; maps consumer names onto ChaCha streams.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic generator: ChaCha8 with an explicit per-consumer stream.
#[derive(Clone, Debug)]
pub struct DetRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Generator on the named substream of `seed`. Each consumer gets its
    /// own label so draws never alias between subsystems.
    pub fn stream(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a64(label.as_bytes()));
        Self { seed, inner }
    }

    /// Derive a fresh stream from this generator's seed and a new label.
    pub fn substream(&self, label: &str) -> Self {
        Self::stream(self.seed, label)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, stddev: f64) -> f64 {
        Normal::new(0.0, stddev).expect("stddev > 0").sample(&mut self.inner)
    }
}

/// Matrix of i.i.d. normal entries with the given standard deviation.
pub fn gaussian_matrix<S: Scalar>(
    rng: &mut DetRng,
    rows: usize,
    cols: usize,
    stddev: f64,
) -> Matrix<S> {
    assert!(rows >= 1 && cols >= 1, "gaussian_matrix needs rows, cols >= 1");
    assert!(stddev > 0.0, "gaussian_matrix needs stddev > 0");
    let dist = Normal::new(0.0, stddev).expect("stddev > 0");
    let data: Vec<S> =
        (0..rows * cols).map(|_| S::lit(dist.sample(&mut rng.inner))).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Matrix of i.i.d. uniform entries on [lo, hi).
pub fn uniform_matrix<S: Scalar>(
    rng: &mut DetRng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Matrix<S> {
    let data: Vec<S> = (0..rows * cols).map(|_| S::lit(rng.uniform(lo, hi))).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}
