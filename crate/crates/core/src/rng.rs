//! Deterministic per-stream random number generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for stream `index` under `seed`, so results do not
/// depend on the order in which streams are consumed.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

/// Stream keyed by a label as well, for unrelated uses of the same seed.
pub fn labeled(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let h = label
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    stream(seed ^ mix(h), index)
}
