//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the run seed and a path of stream identifiers, so results never
//! depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    streams
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn stream(seed: u64, streams: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, streams))
}

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

// Stream tags.
pub const SIMULATE: u64 = 1;
pub const ORACLE_CENTER: u64 = 2;
pub const ORACLE_CAMERA: u64 = 3;
pub const ORACLE_TRACKLET: u64 = 4;
pub const SAMPLE: u64 = 5;
pub const MODEL_INIT: u64 = 6;
pub const BATCH: u64 = 7;
pub const SYNTH: u64 = 8;
