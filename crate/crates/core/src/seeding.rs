//! Derivation of independent RNG streams from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, so rollout and evaluation draws never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Suite = 1,
    Rollout = 2,
    Shuffle = 3,
    Eval = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with an ordered list of stream coordinates.
pub fn derive_seed(seed: u64, purpose: Purpose, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ (purpose as u64).rotate_left(56));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, parts))
}
