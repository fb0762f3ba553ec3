//! Seed derivation. Every random decision in the crate draws from a
//! generator seeded by hashing a base seed with a path of integers, so any
//! sub-computation can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags keep derived seeds for unrelated purposes apart.
pub(crate) mod tag {
    pub const GRADCHECK: u64 = 1;
    pub const INSTANCE: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const STEP: u64 = 4;
    pub const INIT: u64 = 5;
    pub const MANIPULATE: u64 = 6;
    pub const EVAL: u64 = 7;
}
