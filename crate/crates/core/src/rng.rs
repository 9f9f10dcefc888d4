//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Instrument = 1,
    Confounders = 2,
    Treatment = 3,
    OutcomeNoise = 4,
    Split = 5,
    Init = 6,
    Shuffle = 7,
    Gumbel = 8,
    KMeans = 9,
    MonteCarlo = 10,
    Search = 11,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Stream for a numbered sub-task (model index, replicate, restart) of a run.
pub fn substream(seed: u64, which: Stream, index: u64) -> StreamRng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed ^ seed);
    rng.set_stream(which as u64);
    rng
}
