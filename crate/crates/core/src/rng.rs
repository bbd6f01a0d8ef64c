//! Keyed SplitMix64 streams. Every consumer of randomness derives its own
//! generator from `(seed, purpose)`, so no generator state is ever shared.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
pub use rand_xoshiro::SplitMix64;

/// 64-bit FNV-1a; stable across platforms and compiler versions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(mix(seed ^ mix(fnv1a(purpose.as_bytes()))))
}

pub fn stream_indexed(seed: u64, purpose: &str, index: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(mix(
        seed ^ mix(fnv1a(purpose.as_bytes()) ^ mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15))),
    ))
}

pub fn normal(rng: &mut SplitMix64) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
