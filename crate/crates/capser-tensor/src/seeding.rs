//! Deterministic derivation of per-component random streams.
//!
//! Components of a model (each conv block, the attention projections, the
//! routing transforms, ...) draw their initial weights from independent
//! child streams derived from one run seed. Toggling a component on or off
//! therefore never shifts the draws of the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from a parent seed and a label.
///
/// FNV-1a over the label folded into the parent seed, finalized with a
/// splitmix64 round so near-identical labels land far apart.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha stream seeded from [`child_seed`].
pub fn child_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, label))
}
