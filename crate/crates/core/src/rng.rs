//! Seed derivation and RNG construction.
//!
//! Every stochastic component takes an explicit `u64` seed. Child streams are
//! derived with a splitmix64 scrambler so the same `(seed, index)` pair gives
//! the same stream on every platform and under any evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the sub-seed for child stream `index` of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Named sub-streams so independent consumers of one seed never collide.
pub fn stream(seed: u64, tag: &str) -> u64 {
    let mut h = seed;
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
