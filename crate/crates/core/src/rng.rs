//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream whose seed is derived
//! from the run seed and the coordinates of the step (epoch, sample, ...), so
//! results do not depend on evaluation order or worker count.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `coords` under `seed`.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix(seed), |acc, &c| mix(acc ^ mix(c)))
}

pub fn stream(seed: u64, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, coords))
}

/// Stream tags keep unrelated draws under one seed apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const FOLDS: u64 = 5;
    pub const VALIDATION_SPLIT: u64 = 6;
    pub const SYNTH: u64 = 7;
}
