//! Seeded randomness.
//!
//! Streams are ChaCha8 (`rand_chacha`), whose output is defined bit-for-bit
//! independently of platform. A child stream for a named purpose is keyed by
//! `splitmix64(parent_key ^ fnv1a64(purpose))`, so `fork("data")` and
//! `fork("init")` from the same parent never share a stream and never depend
//! on how many values the parent has already produced.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::scalar::Scalar;
use super::tensor::Tensor;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    key: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let key = splitmix64(seed);
        SeededRng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Independent stream for `purpose`, derived from this stream's key only.
    pub fn fork(&self, purpose: &str) -> Self {
        let key = splitmix64(self.key ^ fnv1a64(purpose.as_bytes()));
        SeededRng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Like [`fork`](Self::fork) with an integer index (per seed, per class, ...).
    pub fn fork_indexed(&self, purpose: &str, index: u64) -> Self {
        let key = splitmix64(splitmix64(self.key ^ fnv1a64(purpose.as_bytes())) ^ index);
        SeededRng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
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

    /// Uniform integer in `[lo, hi)`.
    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        assert!(hi > lo, "empty range {lo}..{hi}");
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn randn<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.normal() * std))
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.uniform_range(lo, hi)))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.index(0, i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct draws from `pool` (without replacement, order random).
    pub fn choose_distinct(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        assert!(k <= pool.len(), "cannot draw {k} from {}", pool.len());
        let mut v = pool.to_vec();
        for i in 0..k {
            let j = self.index(i, v.len());
            v.swap(i, j);
        }
        v.truncate(k);
        v
    }
}
