//! Seeded random streams.
//!
//! Every randomized routine takes an explicit RNG. Studies derive independent
//! child streams from one master seed so that any row can be regenerated from
//! the seed recorded next to it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate. ChaCha streams are portable across
/// platforms and crate versions, so seeded output is reproducible.
pub type StudyRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> StudyRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path of stream labels.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(parent), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// Stream labels used when deriving child seeds.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const SOLVER: u64 = 2;
    pub const RANDOM_DESIGNS: u64 = 3;
    pub const OUTCOMES: u64 = 4;
    pub const HETERO_RHO: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const RESTART: u64 = 7;
    pub const PRIOR: u64 = 8;
}
