//! Counter-keyed random streams.
//!
//! Every stochastic consumer derives its generator from a tuple of integers
//! (run seed, purpose, level, index, ...). Streams are therefore independent of
//! scheduling order, which keeps parallel and sequential runs bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key path into one 64-bit stream key.
pub fn key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(key(parts))
}

/// Purpose tags so that unrelated consumers of one run seed never collide.
pub mod tag {
    pub const ENV_RESET: u64 = 1;
    pub const ENV_STEP: u64 = 2;
    pub const MFQ: u64 = 3;
    pub const COLLECT: u64 = 4;
    pub const PARTICLE: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const INIT: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const BRANCH: u64 = 9;
    pub const BOOTSTRAP: u64 = 10;
    pub const VALUE: u64 = 11;
}
