//! Labeled random streams derived from one master seed.
//!
//! Every stochastic stage draws from its own ChaCha stream whose key is the
//! SHA-256 digest of `(label, seed)`. Sub-streams (per block pair, per sample)
//! use the ChaCha stream counter so that their output does not depend on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream_key(label: &str, seed: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

/// Stream for a named stage.
pub fn stage_rng(label: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_key(label, seed))
}

/// Independent sub-stream `index` of a named stage.
pub fn substream_rng(label: &str, seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(stream_key(label, seed));
    rng.set_stream(index);
    rng
}
