//! Seeded random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream keyed by the
//! top-level seed plus a tuple of tags (frame, base station, vehicle, ...), so
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SPAWN: u64 = 1;
pub const TAG_CHANNEL: u64 = 2;
pub const TAG_DETECT: u64 = 3;
pub const TAG_BSM: u64 = 4;
pub const TAG_IDENTIFY: u64 = 5;
pub const TAG_DATASET: u64 = 6;
pub const TAG_INIT: u64 = 7;
pub const TAG_SHUFFLE: u64 = 8;
pub const TAG_TEST_SET: u64 = 9;
pub const TAG_STEP: u64 = 10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and tags into one 64-bit key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
