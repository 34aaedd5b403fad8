//! Seed derivation for independent deterministic random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Derives a child seed from a base seed and a stream tag via splitmix64.
/// Distinct tags give statistically independent streams, so one experiment
/// seed can drive initialization, shuffling, and dropout without the streams
/// aliasing each other.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha20 generator for the given base seed and stream tag.
pub fn stream_rng(base: u64, tag: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, tag))
}
