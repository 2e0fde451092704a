//! Seeded random streams. Every consumer of randomness draws from its own
//! named stream so that adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers for the consumers of a run seed.
pub mod streams {
    pub const DATASET_TRAIN: u64 = 1;
    pub const DATASET_TEST: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const DISCRIMINATOR: u64 = 6;
    pub const REGRESSOR: u64 = 7;
    pub const AUX_HEAD: u64 = 8;
}

/// A seed for a sub-component, drawn from stream `stream` of `seed`.
pub fn derive(seed: u64, stream_id: u64) -> u64 {
    use rand::RngCore;
    stream(seed, stream_id).next_u64()
}
