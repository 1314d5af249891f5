//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`), whose output
//! is specified bit-for-bit and independent of platform or word size. Child
//! streams for parallel work are derived with [`derive_seed`], a SplitMix64
//! finalizer over `(seed, stream)`, so a task's samples depend only on its
//! index and never on scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child stream `stream` of a generator seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(GOLDEN))
}

/// A seeded, single-owner random stream.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; does not advance `self`.
    pub fn split(&self, stream: u64) -> RngState {
        RngState::new(derive_seed(self.seed, stream))
    }

    /// Position in the underlying keystream, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Rebuilds a stream at a saved position.
    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_word_pos(word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Normal sample rejected and redrawn until it lies within `±cutoff·std`.
    pub fn truncated_normal(&mut self, std: f64, cutoff: f64) -> f64 {
        loop {
            let z = self.standard_normal();
            if z.abs() <= cutoff {
                return z * std;
            }
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }
}

/// Tensor of i.i.d. `N(mean, std²)` samples.
pub fn gaussian<T: Scalar>(shape: &[usize], mean: f64, std: f64, rng: &mut RngState) -> Tensor<T> {
    assert!(std > 0.0, "gaussian: std must be positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal(mean, std))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Tensor of zero-mean normal samples truncated to `±cutoff·std` by rejection.
pub fn truncated_gaussian<T: Scalar>(
    shape: &[usize],
    std: f64,
    cutoff: f64,
    rng: &mut RngState,
) -> Tensor<T> {
    assert!(std > 0.0 && cutoff > 0.0, "truncated_gaussian: std and cutoff must be positive");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.truncated_normal(std, cutoff)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
