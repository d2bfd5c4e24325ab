//! Seeded randomness.
//!
//! Every stochastic step draws from a ChaCha8 stream whose 32-byte key is
//! `SHA-256(seed as little-endian u64 || scope)`. Scopes are stable strings
//! such as a study id or a stimulus key, so adding a study never changes the
//! draws made for another one.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub fn keyed_rng(seed: u64, scope: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(scope_digest(seed, scope))
}

/// The raw key used by [`keyed_rng`]; also handy as a stable sort key.
pub fn scope_digest(seed: u64, scope: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(scope.as_bytes());
    hasher.finalize().into()
}
