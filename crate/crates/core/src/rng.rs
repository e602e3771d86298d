//! Deterministic random streams derived from one master seed.
//!
//! Every consumer asks for a stream by a human-readable label such as
//! `"replicate/17/generate"`. The stream seed is a hash of the master seed
//! and the label, so adding a new consumer never shifts the draws of an
//! existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used for every stream in the crate.
pub type StreamRng = ChaCha8Rng;

/// Derives a 64-bit sub-seed from `master` and `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Returns the generator for the labelled stream.
pub fn stream(master: u64, label: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, label))
}
