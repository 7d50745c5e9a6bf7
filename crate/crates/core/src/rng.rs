//! Named random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is
//! derived from a root seed and a path of labels, so any component (data,
//! init, shuffle, PGD) can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from `root` and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Derive a child seed from `root` and an integer index (e.g. example or epoch).
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    derive_seed(derive_seed(root, label), &index.to_string())
}

pub fn substream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
