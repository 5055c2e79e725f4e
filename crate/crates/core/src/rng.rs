//! Seeded randomness shared by every reproducible protocol in the crate.
//!
//! The generator is ChaCha8 (`rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`, whose output stream is value-stable across
//! platforms and releases. Index selection does not go through `rand`'s
//! sampling helpers (which may change between versions); it uses the
//! procedure below, so a split can be re-derived from `(n, seed)` alone:
//!
//! * start from `[0, 1, ..., n-1]`;
//! * for `i` in `0..k`: draw `r = next_u64()`, let `j = i + r % (n - i)`,
//!   swap positions `i` and `j`;
//! * the first `k` entries are the selection, in draw order.
//!
//! A full shuffle is the same procedure with `k = n`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ProtocolRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> ProtocolRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `k` distinct indices from `0..n` in draw order.
pub fn sample_indices(rng: &mut impl RngCore, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let span = (n - i) as u64;
        let j = i + (rng.next_u64() % span) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    let n = items.len();
    for i in 0..n {
        let j = i + (rng.next_u64() % (n - i) as u64) as usize;
        items.swap(i, j);
    }
}
