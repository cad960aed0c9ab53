//! Stable seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! 64-bit value derived as `mix(mix(seed ^ fnv1a(label)) + index)`, where
//! `mix` is the SplitMix64 finaliser and `fnv1a` the 64-bit FNV-1a hash of
//! the label bytes. The derivation never depends on evaluation order or
//! thread count, so parallel work reproduces sequential results bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from `(seed, label, index)`.
pub fn derive(seed: u64, label: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ fnv1a(label)).wrapping_add(index))
}

/// A generator seeded with [`derive`]`(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive(seed, label, index))
}
