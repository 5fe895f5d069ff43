//! Seeded RNG substreams.
//!
//! Every random choice in the crate flows from a single `u64` seed through a
//! named substream, so any component (a sweep cell, a probe split, a dataset)
//! is reproducible in isolation and in any execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over arbitrary bytes; stable across platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from `(seed, tag)`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + tag.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    fnv1a(&buf)
}

/// A deterministic RNG for the named substream of `seed`.
pub fn substream(seed: u64, tag: &str) -> ChaCha12Rng {
    let child = derive_seed(seed, tag);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&child.to_le_bytes());
    key[8..16].copy_from_slice(&child.wrapping_mul(0x9e3779b97f4a7c15).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
