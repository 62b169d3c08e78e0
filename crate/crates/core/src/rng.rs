//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit experiment seed
//! (expanded with `SeedableRng::seed_from_u64`) and selected by a 64-bit
//! stream id via `set_stream`. Distinct ids give independent streams from the
//! same seed, so each consumer (pattern generation, training batches,
//! evaluation sets, initialization, random pruning) draws from its own stream
//! and adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const PATTERNS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PROFICIENCY: u64 = 5;
    pub const RANDOM_PRUNE: u64 = 6;
    pub const HEADS: u64 = 7;
    pub const POST_TRAIN: u64 = 8;
    pub const GRADCHECK: u64 = 9;
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
