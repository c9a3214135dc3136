//! Deterministic seed derivation.
//!
//! Every random draw in the simulator comes from a `ChaCha8Rng` whose seed is
//! derived from a master seed and a short list of integer tags (round index,
//! client id, purpose), so that runs are reproducible bit-for-bit and
//! independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Kept as constants so derived seeds stay stable.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const KEYGEN: u64 = 4;
    pub const TRIGGERS: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const DP_NOISE: u64 = 8;
    pub const PRUNE: u64 = 9;
    pub const FINETUNE: u64 = 10;
    pub const LAYOUT: u64 = 11;
    pub const VANILLA: u64 = 12;
    pub const SWEEP: u64 = 13;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a sequence of tags into a new seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
