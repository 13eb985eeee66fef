//! Deterministic seed derivation.
//!
//! Every random stream in a run is a ChaCha8 generator keyed by a base seed
//! and a short path of stream labels (round index, device id, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a base seed with a sequence of stream labels.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

// stream labels
pub const SPLIT: u64 = 1;
pub const SHARE: u64 = 2;
pub const SUBSET: u64 = 3;
pub const INIT: u64 = 4;
pub const IMPAIR: u64 = 5;
pub const MENDER: u64 = 6;
pub const SELECT: u64 = 7;
pub const DEVICE: u64 = 8;
pub const SERVER: u64 = 9;
pub const LDP: u64 = 10;
pub const SYNTH: u64 = 11;
