//! Seed derivation. Every random draw in a run comes from a ChaCha stream
//! keyed by a root seed plus a path of indices, so any episode can be
//! regenerated without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of indices into a child seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(root: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, path))
}

/// Stream tags keeping independent uses of one root seed apart.
pub mod stream {
    pub const TRAIN_TASKS: u64 = 1;
    pub const EVAL_TASKS: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const EVAL_NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const MONITOR_TASKS: u64 = 6;
}
