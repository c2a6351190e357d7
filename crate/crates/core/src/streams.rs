//! Counter-based random streams: every draw site derives its own generator from
//! `(seed, key...)`, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep different consumers of one seed apart.
pub mod tag {
    pub const SUBJECT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into one 64-bit value.
pub fn mix(seed: u64, key: &[u64]) -> u64 {
    key.iter().fold(splitmix64(seed), |h, &k| splitmix64(h ^ splitmix64(k)))
}

pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, key))
}

/// Stable 64-bit FNV-1a hash of a string key.
pub fn text_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
