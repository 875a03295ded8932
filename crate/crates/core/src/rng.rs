//! Named, derivable random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! a hash of the global seed and a path of integers (stream name, sample
//! index, noise level, ...). Results therefore do not depend on evaluation
//! order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers.
pub mod streams {
    pub const TRAIN: u64 = 0x7472_6169;
    pub const CORRUPT: u64 = 0x636f_7272;
    pub const PROBE: u64 = 0x7072_6f62;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const DATA: u64 = 0x6461_7461;
    pub const CALIBRATE: u64 = 0x6361_6c69;
    pub const SCORE: u64 = 0x7363_6f72;
    pub const INIT: u64 = 0x696e_6974;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`, order-sensitively.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, parts))
}
