//! Counter-based RNG streams.
//!
//! Every random draw in the workspace comes from a ChaCha stream keyed by
//! (top-level seed, stage tag, counters). Streams for different counters are
//! independent, so e.g. witness i of a store with M=100 is bit-identical to
//! witness i of a store with M=1000 under the same seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a seed, a stage tag, and counters.
pub fn stream(seed: u64, tag: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(tag.as_bytes());
    h.update([0u8]);
    for c in counters {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
