//! Seeded randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream cipher keyed by
//! a single 64-bit seed. ChaCha is counter based, so independent consumers use
//! distinct stream ids of the same key instead of sharing one generator; the
//! output is identical across platforms and thread schedules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids reserved for the major consumers.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const TRAJECTORY: u64 = 2;
    pub const FEATURE_MAP: u64 = 3;
    pub const FEATURE_NOISE: u64 = 4;
    pub const EXTRA_NOISE: u64 = 5;
    pub const INIT: u64 = 10;
    pub const BATCHES: u64 = 11;
    pub const DROPOUT: u64 = 12;
    pub const LATENT: u64 = 13;
    pub const AUGMENT: u64 = 14;
    pub const FOREST: u64 = 20;
    pub const VOLUME: u64 = 30;
    pub const GRID: u64 = 31;
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive child seeds (per tree, per dimension).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
