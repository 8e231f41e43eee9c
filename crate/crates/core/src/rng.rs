//! Named, splittable random streams.
//!
//! Every stochastic operation takes a [`StreamRng`] explicitly. A stream is
//! identified by a root seed plus a path of names and indices, so stages can
//! be replayed independently of each other.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct StreamRng {
    seed: u64,
    path: String,
    inner: ChaCha8Rng,
}

/// Serializable position of a stream; restoring it resumes the exact sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub path: String,
    pub word_pos: u128,
}

impl StreamRng {
    pub fn new(seed: u64, name: &str) -> Self {
        Self::from_path(seed, name.to_string())
    }

    fn from_path(seed: u64, path: String) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(path.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        StreamRng {
            seed,
            path,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream named relative to this one. Does not advance `self`.
    pub fn substream(&self, name: &str) -> Self {
        Self::from_path(self.seed, format!("{}/{}", self.path, name))
    }

    /// Child stream keyed by an index (per-utterance, per-seed, ...).
    pub fn fork(&self, index: u64) -> Self {
        Self::from_path(self.seed, format!("{}#{}", self.path, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            path: self.path.clone(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut rng = Self::from_path(state.seed, state.path.clone());
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// Draws an index from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

impl RngCore for StreamRng {
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
