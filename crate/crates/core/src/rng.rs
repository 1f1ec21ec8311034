//! Seeded, splittable random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by
//! `(seed, tag, index)`, so independent tasks can be scheduled in any order
//! and still reproduce bit-identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Keeping them in one place avoids accidental reuse.
pub mod tag {
    pub const SIGNAL: u64 = 1;
    pub const EDGES: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const PERTURB: u64 = 4;
    pub const EXTEND_TIME: u64 = 5;
    pub const EXTEND_CHANNEL: u64 = 6;
    pub const MCMC: u64 = 7;
    pub const DISORDER: u64 = 8;
    pub const PSI: u64 = 9;
    pub const GAMMA: u64 = 10;
    pub const OPTIMIZER: u64 = 11;
    pub const FDS: u64 = 12;
    pub const PAIRS: u64 = 13;
    pub const BINOMIAL: u64 = 14;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed; used to give each disorder sample its own master seed.
pub fn child_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    rng.set_stream(index);
    rng
}
