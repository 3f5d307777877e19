//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha20 stream whose
//! 64-bit seed is derived with SplitMix64 mixing. Draws are defined only in
//! terms of `next_u64`, so the sequence is reproducible by any implementation
//! of ChaCha20 and the helpers below:
//!
//! * `uniform01`: `(next_u64 >> 11) * 2^-53`, a double in `[0, 1)`.
//! * `uniform(lo, hi)`: `lo + (hi - lo) * uniform01`.
//! * `index(n)`: `floor(uniform01 * n)`, clamped to `n - 1`.
//! * `normal`: Box-Muller on two `uniform01` draws `u1, u2`, returning
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`. The paired sine value is discarded
//!   so every normal costs exactly two words.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive_seed(parent: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(parent), |acc, &l| mix64(acc ^ mix64(l)))
}

/// 64-bit FNV-1a, used to turn record ids into seed labels.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Serializable position of a [`Stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    /// ChaCha word position, stored as two halves so JSON stays lossless.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// A deterministic random stream.
#[derive(Clone, Debug)]
pub struct Stream {
    seed: u64,
    inner: ChaCha20Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// A stream whose seed is `derive_seed(parent, labels)`.
    pub fn derived(parent: u64, labels: &[u64]) -> Self {
        Self::new(derive_seed(parent, labels))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> StreamState {
        let pos = self.inner.get_word_pos();
        StreamState {
            seed: self.seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: StreamState) -> Self {
        let mut s = Self::new(state.seed);
        let pos = (u128::from(state.word_pos_hi) << 64) | u128::from(state.word_pos_lo);
        s.inner.set_word_pos(pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        let i = (self.uniform01() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        lo + self.index((hi - lo) as usize + 1) as u32
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform01();
        let u2 = self.uniform01();
        libm::sqrt(-2.0 * libm::log(1.0 - u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    /// Fisher-Yates shuffle drawing `index(i + 1)` for `i` from the top down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
