//! Seeded random streams.
//!
//! Every stochastic component takes an explicit `u64` seed and derives
//! independent sub-streams with [`derive_seed`], so that adding a consumer
//! never perturbs the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    rng_from_seed(derive_seed(seed, stream))
}

#[inline]
pub fn normal_f32(rng: &mut Rng) -> f32 {
    StandardNormal.sample(rng)
}

#[inline]
pub fn normal_f64(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f32]) {
    for v in out {
        *v = normal_f32(rng);
    }
}
