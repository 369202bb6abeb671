//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed mixed with a path of stream identifiers, so any
//! stream can be reproduced without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, path))
}

/// Stream tags, kept distinct so unrelated draws never share a generator.
pub(crate) mod tag {
    pub const SUBJECT: u64 = 1;
    pub const SEGMENT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const MASK_RATIO: u64 = 4;
    pub const MASK_PLAN: u64 = 5;
    pub const BATCH_ORDER: u64 = 6;
    pub const VIEWS: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const INIT: u64 = 9;
    pub const VALIDATION: u64 = 10;
    pub const PROBE: u64 = 11;
    pub const GRADCHECK: u64 = 12;
    pub const FINETUNE: u64 = 13;
}
