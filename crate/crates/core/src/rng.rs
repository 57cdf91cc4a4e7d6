//! Deterministic fan-out of one root seed into independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Mixing a tag into the root seed gives unrelated sequences.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const MODEL: u64 = 0x02;
    pub const EPISODE: u64 = 0x03;
    pub const AUGMENT: u64 = 0x04;
    pub const EVAL: u64 = 0x05;
    pub const BACKBONE: u64 = 0x06;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a seed for the stream identified by `path` under `root`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, path))
}
