use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Counter-based generator: a (seed, stream) key selects a ChaCha8 keystream
/// and the word position is the counter. Two generators with equal state
/// produce equal streams regardless of history.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
}

/// Words reserved per keyed block, see [`Rng::keyed`].
const BLOCK_WORDS: u128 = 1 << 24;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Generator positioned at block `block` of `(seed, stream)`. Used to
    /// derive per-step draws (e.g. the drop mask of step `t`) without
    /// replaying earlier steps.
    pub fn keyed(seed: u64, stream: u64, block: u64) -> Self {
        let mut rng = Self::with_stream(seed, stream);
        rng.inner.set_word_pos(block as u128 * BLOCK_WORDS);
        rng
    }

    /// Independent generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: u64::try_from(self.inner.get_word_pos()).expect("word position fits in u64"),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos as u128);
        rng
    }

    /// Uniform draw strictly inside (0, 1) on a 2^-24 grid.
    pub fn uniform(&mut self) -> f32 {
        (((self.inner.next_u32() >> 8) as f64 + 0.5) / (1u64 << 24) as f64) as f32
    }

    /// Uniform draw in [lo, hi) at double precision.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform_range(0.0, 1.0) * n as f64) as usize % n
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` uniform draws in [0, 1) (in fact in the open interval).
pub fn uniform_sample(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform()).collect()
}
