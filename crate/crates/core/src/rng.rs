//! Seed handling.
//!
//! Every random stream in the crate is a `ChaCha8Rng` (the `rand_chacha`
//! implementation, seeded through `SeedableRng::seed_from_u64`). Sub-seeds
//! are derived from a parent seed with the SplitMix64 finalizer, so a whole
//! experiment is a pure function of one `u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep derived seeds for different purposes apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Geometry = 1,
    Draw = 2,
    Split = 3,
    Train = 4,
    Retrain = 5,
    Restart = 6,
    Init = 7,
    Epoch = 8,
    Eval = 9,
    Trial = 10,
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` for the given stream and index.
pub fn derive(parent: u64, stream: Stream, index: u64) -> u64 {
    let tagged = splitmix64(parent ^ splitmix64((stream as u64) << 32 ^ index));
    splitmix64(tagged)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
