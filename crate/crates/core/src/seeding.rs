//! Deterministic RNG streams.
//!
//! Every independent unit of work (an image, a candidate, a shuffle) gets its
//! own ChaCha stream keyed by the global seed and a stable label, so results
//! do not depend on scheduling order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn stream(seed: u64, key: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, key))
}

/// Draws child seeds from a parent stream, one per work item.
pub fn child_seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}
