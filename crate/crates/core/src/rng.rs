//! Deterministic seed derivation shared by data generation, batching and
//! saliency perturbations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered tuple of integers into one 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5151_4C5F_5345_4544u64, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}
