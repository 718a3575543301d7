//! Seed derivation. Every random stream in the lab is a ChaCha8 generator seeded
//! from a root seed mixed with stream labels, so draws are a pure function of
//! (root seed, labels) and independent of call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a list of labels into a new 64-bit seed.
pub fn derive(root: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(root), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng(root: u64, labels: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(root, labels))
}

/// Stream labels used across modules.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const QA: u64 = 2;
    pub const PROMPT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const KMEANS: u64 = 8;
    pub const EVAL: u64 = 9;
}
