//! Seed derivation helpers.
//!
//! Every random choice in the workbench flows from a `u64` seed plus a short
//! purpose tag, so independent stages (weight init, shuffling, subset
//! sampling, model selection) never share a stream by accident and every run
//! is replayable from the seeds recorded in its report.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-avalanche mix of a 64-bit value.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a hash of a purpose tag.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes two 64-bit values into one with full avalanche.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Derives a child seed from a base seed and a purpose tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    mix(seed, tag_hash(tag))
}

/// Seeded generator for a (seed, tag) pair.
pub fn seeded(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Maps a mixed 64-bit value onto `0..n` with negligible bias.
///
/// Uses the fixed-point multiply trick; for n up to a few thousand the bias
/// is on the order of n / 2^64 and irrelevant to any test in this crate.
pub fn bounded(x: u64, n: usize) -> usize {
    debug_assert!(n > 0);
    (((u128::from(x)) * (n as u128)) >> 64) as usize
}
