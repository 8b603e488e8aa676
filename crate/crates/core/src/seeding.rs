//! Counter-based seed derivation.
//!
//! Every random stream in a run is addressed by a path of integers rooted at
//! the experiment seed, e.g. `(root, trial, tx, rx)`. Streams never share
//! state, so trials can execute in any order or on any thread and still
//! reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same trial apart.
pub mod tag {
    pub const TRIAL: u64 = 0x7472_6961_6c00_0001;
    pub const GEOMETRY: u64 = 0x6765_6f6d_0000_0002;
    pub const HEADING: u64 = 0x6865_6164_0000_0003;
    pub const LINK: u64 = 0x6c69_6e6b_0000_0004;
    pub const PAYLOAD: u64 = 0x7061_796c_0000_0005;
    pub const NOISE: u64 = 0x6e6f_6973_0000_0006;
    pub const SYNC: u64 = 0x7379_6e63_0000_0007;
    pub const RESERVOIR: u64 = 0x7265_7376_0000_0008;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of integers into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Seed of trial `index` under `root`.
pub fn trial_seed(root: u64, index: usize) -> u64 {
    derive(&[root, tag::TRIAL, index as u64])
}
