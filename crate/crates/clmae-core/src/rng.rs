//! Seeded random stream with an exactly restorable state.
//!
//! All stochastic choices in a run (data shuffling, parameter init, mask
//! fallbacks) come from one `Stream`, so a run is a pure function of its
//! seed and a checkpoint can freeze the stream mid-run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Serialized form: 32-byte seed, 8-byte stream id, 16-byte word position.
pub const STATE_LEN: usize = 56;

#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("std must be finite").sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }

    /// First `take` entries of a random permutation of 0..n.
    pub fn choose_distinct(&mut self, n: usize, take: usize) -> Vec<usize> {
        assert!(take <= n, "cannot choose {take} distinct values below {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.truncate(take);
        idx
    }

    pub fn state(&self) -> [u8; STATE_LEN] {
        let mut out = [0u8; STATE_LEN];
        out[..32].copy_from_slice(&self.rng.get_seed());
        out[32..40].copy_from_slice(&self.rng.get_stream().to_le_bytes());
        out[40..56].copy_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn restore(state: &[u8; STATE_LEN]) -> Self {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&state[..32]);
        let stream = u64::from_le_bytes(state[32..40].try_into().unwrap());
        let word_pos = u128::from_le_bytes(state[40..56].try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Stream { rng }
    }
}
