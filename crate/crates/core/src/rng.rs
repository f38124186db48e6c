//! Labeled random streams.
//!
//! Every consumer of randomness derives its own generator from the global
//! seed, a component label and an index, so a sub-stream does not shift
//! when an unrelated part of the configuration changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream_seed(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::from_seed(stream_seed(seed, label, index))
}

/// Derives a child `u64` seed, for handing to components that take a plain seed.
pub fn child_seed(seed: u64, label: &str, index: u64) -> u64 {
    let bytes = stream_seed(seed, label, index);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
