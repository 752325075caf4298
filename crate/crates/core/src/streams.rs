//! Random stream splitting. Every consumer of randomness derives its own
//! ChaCha8 stream from the root seed, a fixed tag and an index, so results do
//! not depend on the order in which streams are created or scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SIMULATE: u64 = 0x5349_4d55;
pub const TAG_MCMC: u64 = 0x4d43_4d43;
pub const TAG_GLMM: u64 = 0x474c_4d4d;
pub const TAG_PROFILE: u64 = 0x5052_4f46;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `index` of component `tag` under root `seed`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag).wrapping_add(index))
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
