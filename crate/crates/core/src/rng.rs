//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes its randomness from a [`RandomSource`]:
//! a 64-bit seed plus a 64-bit stream id mapped onto ChaCha8's native stream
//! counter. Work that may run in parallel (frames, batch samples, tiles)
//! derives its own stream with [`RandomSource::derive`] so results never
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator handed out by [`RandomSource::rng`].
pub type SourceRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomSource {
    pub seed: u64,
    pub stream: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> SourceRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Child source for sub-task `index` under purpose `tag`.
    ///
    /// The child keeps the seed and gets a stream id mixed from the parent
    /// stream, the tag and the index, so sibling children never collide in
    /// practice and derivation is independent of call order.
    pub fn derive(&self, tag: u64, index: u64) -> Self {
        let mut h = splitmix64(self.stream ^ 0x5851_f42d_4c95_7f2d);
        h = splitmix64(h ^ tag);
        h = splitmix64(h ^ index);
        Self {
            seed: self.seed,
            stream: h,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags used across the crate. Keeping them in one place avoids
/// accidental reuse of a stream for two purposes.
pub mod tags {
    pub const SIMULATE_FRAME: u64 = 1;
    pub const TRAIN_STEP: u64 = 2;
    pub const TRAIN_SAMPLE: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const FIXED_PAIRS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHOT: u64 = 7;
    pub const BATTERY: u64 = 8;
}
