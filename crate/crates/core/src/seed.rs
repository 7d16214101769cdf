//! Seed derivation.
//!
//! One root seed fans out into independent per-purpose streams by mixing a
//! fixed purpose tag (and optional indices) through SplitMix64. Changing how
//! one stream is consumed never shifts another: toggling jitter leaves the
//! initial weights untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 0x1,
    Data = 0x2,
    Partition = 0x3,
    Shuffle = 0x4,
    Jitter = 0x5,
    Synthetic = 0x6,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `splitmix64(root ^ splitmix64(tag))`, then each index folded in turn.
pub fn derive(root: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut s = splitmix64(root ^ splitmix64(purpose as u64));
    for &i in indices {
        s = splitmix64(s ^ splitmix64(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    s
}

pub fn rng(root: u64, purpose: Purpose, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, purpose, indices))
}

/// Deterministic uniform draw in `[0, 1)` without constructing a generator.
pub fn unit_f64(root: u64, purpose: Purpose, indices: &[u64]) -> f64 {
    (derive(root, purpose, indices) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
