//! Deterministic seed derivation for per-item generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with a stream key into an independent seed.
pub fn derive(seed: u64, key: u64) -> u64 {
    mix64(mix64(seed) ^ key.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn rng(seed: u64, key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, key))
}
