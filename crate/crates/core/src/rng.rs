//! Seed derivation. Every stochastic component draws from a ChaCha stream whose
//! seed is a pure function of the run seed and a few integer coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of coordinates (stream tag, step, prompt, ...).
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_from(base: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, coords))
}

/// Stream tags so unrelated consumers of the same seed never share a stream.
pub mod stream {
    pub const GOLD: u64 = 1;
    pub const REFERENCE_NOISE: u64 = 2;
    pub const DATASET: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const ONLINE_SAMPLING: u64 = 5;
    pub const REFERENCE_RESPONSES: u64 = 6;
    pub const RANKINGS: u64 = 7;
}
