//! Seed derivation. Every stochastic routine derives its stream from an
//! explicit `(seed, index)` pair so parallel schedules reproduce the serial
//! result bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// splitmix64 finalizer over the pair.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = StandardNormal.sample(rng);
    T::lit(x)
}

pub fn normal_vec<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, n: usize, scale: T) -> Vec<T> {
    (0..n).map(|_| standard_normal::<T, R>(rng) * scale).collect()
}

pub fn rademacher_vec<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
        .collect()
}
