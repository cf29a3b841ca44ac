//! Counter-based random streams keyed by `(seed, purpose, index)`.
//!
//! Every consumer of randomness derives its own ChaCha stream, so results do
//! not depend on scheduling order or on how many other streams were drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod purpose {
    pub const PARTITION: u64 = 1;
    pub const LEARNER_CV: u64 = 2;
    pub const RIESZ_CV: u64 = 3;
    pub const COUNTERFACTUAL: u64 = 4;
    pub const DGP: u64 = 5;
    pub const REPLICATION: u64 = 6;
    pub const ORACLE_SAMPLE: u64 = 7;
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a list of tags into a single 64-bit key.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(derive(purpose, &[index]));
    rng
}
