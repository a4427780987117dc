//! Seeded random streams. Every random draw in the stack flows from one
//! configured seed through these helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers, kept distinct so that adding draws to one consumer
/// never shifts another.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    /// Batch order uses `SHUFFLE_BASE + epoch`.
    pub const SHUFFLE_BASE: u64 = 1 << 20;
    /// Dropout uses `DROPOUT_BASE + iteration`.
    pub const DROPOUT_BASE: u64 = 1 << 32;
}
