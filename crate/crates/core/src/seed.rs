//! Seed derivation for independent deterministic RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a stream tag and an index.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ stream) ^ index)
}

pub fn rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream, index))
}

/// Stream tags, kept distinct so that consumers never share a sequence.
pub mod streams {
    pub const GENERATION: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const DATASET: u64 = 0x04;
    pub const STARTS: u64 = 0x05;
    pub const EPISODE_NOISE: u64 = 0x06;
    pub const EPISODE_POLICY: u64 = 0x07;
    pub const ANALYTICS: u64 = 0x08;
    pub const AFFINITY: u64 = 0x09;
    pub const PROJECTION: u64 = 0x0A;
    pub const GRADCHECK: u64 = 0x0B;
}
