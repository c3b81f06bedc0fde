//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! master seed and a tag path (phase, round, client, ...). Streams therefore
//! never depend on the order in which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags. Values are arbitrary but fixed; changing one changes results.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const FOLDS: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const GLOBAL: u64 = 0x04;
    pub const LOCAL: u64 = 0x05;
    pub const MUTUAL: u64 = 0x06;
    pub const HOLDOUT: u64 = 0x07;
    pub const CLIENT_INIT: u64 = 0x08;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a 64-bit seed from a master seed and a path of tags.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &t| {
        splitmix64(acc ^ splitmix64(t))
    })
}

pub fn stream(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}
