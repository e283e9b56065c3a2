//! Deterministic random substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 generator keyed by
//! the run seed, with the 64-bit stream id selected from a [`Purpose`] and an
//! index (usually the episode number). Two substreams never overlap, so the
//! randomness consumed by one episode does not depend on what ran before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default run seed.
pub const DEFAULT_SEED: u64 = 42;

pub type StreamRng = ChaCha8Rng;

/// What a substream is used for. The discriminant occupies the top byte of
/// the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    TrainSampling = 2,
    TrainAugment = 3,
    TrainDropout = 4,
    Validation = 5,
    Evaluation = 6,
    Synthetic = 7,
    Check = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for `(purpose, index)`; `index` must fit in 56 bits.
    pub fn stream(&self, purpose: Purpose, index: u64) -> StreamRng {
        debug_assert!(index < 1 << 56);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
        rng
    }

    /// Derived seed space for nested loops, e.g. one validation round's episodes.
    pub fn child(&self, purpose: Purpose, index: u64) -> SeedStreams {
        use rand::Rng;
        SeedStreams::new(self.stream(purpose, index).random())
    }
}
