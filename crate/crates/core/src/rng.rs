//! Seed derivation and initializers. Every stochastic choice in the pipeline
//! draws from a `ChaCha8Rng` seeded by [`derive_seed`] so results do not
//! depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numeric::Real;

pub type SeedRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integer tags into an independent seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Stable 64-bit tag for a string (FNV-1a).
pub fn tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normal samples truncated to ±2σ by resampling.
pub fn trunc_normal<T: Real>(rng: &mut SeedRng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect()
}

/// He-normal initialization for a layer with the given fan-in.
pub fn kaiming_normal<T: Real>(rng: &mut SeedRng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std)).collect()
}

pub fn uniform(rng: &mut SeedRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
