//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the tuple
//! `(seed, domain, a, b)`, each packed as a little-endian `u64`. The draw
//! index is the keystream position, so any worker can reproduce any draw
//! from the key alone without sharing generator state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Separates the independent uses of one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    CandidateSeed = 1,
    CandidateNormal = 2,
    Subset = 3,
    ModelInit = 4,
    AdapterInit = 5,
    Task = 6,
}

/// A keyed, counter-based generator.
pub fn keyed(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// First word of the keyed stream; used to derive child seeds.
pub fn derive_seed(seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    keyed(seed, domain, a, b).next_u64()
}

/// `n` standard normal draws.
pub fn normals(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform index in `0..bound` by the multiply-shift method:
/// `(next_u64 · bound) >> 64`.
pub fn uniform_index(rng: &mut impl RngCore, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// Fisher–Yates shuffle drawing `j = uniform_index(i + 1)` for
/// `i = n-1, …, 1`.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}
