//! Deterministic RNG stream derivation.
//!
//! Every random decision in a simulation draws from a ChaCha stream derived
//! from `(master seed, domain, a, b)`. Client streams depend only on
//! `(seed, round, client_id)`, so results are identical under any scheduling
//! order, serial or parallel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_INIT: u64 = 1;
pub const DOMAIN_TRAIN_DATA: u64 = 2;
pub const DOMAIN_TEST_DATA: u64 = 3;
pub const DOMAIN_ANCHOR_SPLIT: u64 = 4;
pub const DOMAIN_PARTITION: u64 = 5;
pub const DOMAIN_PRETRAIN: u64 = 6;
pub const DOMAIN_SELECT: u64 = 7;
pub const DOMAIN_CLIENT: u64 = 8;
pub const DOMAIN_SERVER: u64 = 9;

/// Derives an independent ChaCha stream from the master seed and a domain tag.
///
/// `a` and `b` sub-key the stream (round index, client id, epoch, ...).
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Collapses a derived stream into a single `u64` sub-seed, for operations
/// whose public interface takes a plain seed.
pub fn sub_seed(seed: u64, domain: u64) -> u64 {
    use rand_chacha::rand_core::RngCore;
    stream(seed, domain, 0, 0).next_u64()
}
