//! Deterministic per-purpose RNG streams.
//!
//! One global seed fans out to independent streams keyed by a stable label,
//! so changing how one component draws never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// FNV-1a over the label bytes, mixed with the global seed.
fn label_hash(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the RNG stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> RngStream {
    ChaCha8Rng::seed_from_u64(label_hash(seed, label))
}
