//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from the
//! master seed plus a path of integers (stream tag, student index, ...), so
//! work can be scheduled in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags for the named substreams.
pub mod stream {
    pub const POLICY_INIT: u64 = 1;
    pub const VALUE_INIT: u64 = 2;
    pub const COLLECT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const SIMULATE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const GRID_TASK: u64 = 7;
    pub const GRID_FINAL: u64 = 8;
    pub const SHUFFLE: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path` in order.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, path))
}
