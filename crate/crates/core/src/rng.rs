//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` seeded from a
//! user seed mixed with a purpose tag and an index, so independent consumers (per
//! partition, per restart, per simulated row) never share or reorder draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod purpose {
    pub const MODEL: u64 = 1;
    pub const ROWS: u64 = 2;
    pub const CONTAMINATE: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const RESTART: u64 = 5;
    pub const PLAN: u64 = 6;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a purpose tag and an index into a new 64-bit seed.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(purpose)) ^ index)
}

pub(crate) fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}
