//! Seed derivation.
//!
//! Per-item seeds come from a master seed and a counter through one round of
//! SplitMix64, so the seed for item `k` never depends on which other items ran
//! or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer applied to `master + (counter + 1) * golden gamma`.
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    let mut z = master.wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds several counters into one seed.
pub fn derive_seed_n(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(master, |acc, &p| derive_seed(acc, p))
}

pub fn rng(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_n(master, parts))
}
