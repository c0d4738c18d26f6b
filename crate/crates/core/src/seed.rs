//! Deterministic RNG stream derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of tags into a new 64-bit seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// An independent ChaCha8 stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

// stream tags
pub const TAG_DATA: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_AUGMENT: u64 = 3;
pub const TAG_STUDENT: u64 = 4;
pub const TAG_STUDENT_PROJ: u64 = 5;
pub const TAG_TEACHER_PROJ: u64 = 6;
pub const TAG_BANK_S: u64 = 7;
pub const TAG_BANK_T: u64 = 8;
pub const TAG_SPLIT: u64 = 9;
