//! Portable per-stream random number derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, domain, a, b)`. Streams are mixed with SplitMix64, so adding a
//! new consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_LANDMARKS: u64 = 0x4c4d;
pub const DOMAIN_OBSERVATION: u64 = 0x4f42;
pub const DOMAIN_SELECTION: u64 = 0x5345;
pub const DOMAIN_CORRUPTION: u64 = 0x4352_0000;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a stream key into a single 64-bit seed.
pub fn stream_key(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ domain);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

/// Independent generator for the stream `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, domain, a, b))
}
