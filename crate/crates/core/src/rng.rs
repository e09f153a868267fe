//! Seed derivation. Every random stream in the crate is a ChaCha generator
//! keyed by a seed mixed from a parent seed and a stream tag, so parallel or
//! reordered generation never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a child seed out of `seed` and an integer stream id.
pub fn mix(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.rotate_left(17))
}

/// Mixes a child seed out of `seed` and a textual tag.
pub fn mix_tag(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then through splitmix.
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    });
    mix(seed, h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
