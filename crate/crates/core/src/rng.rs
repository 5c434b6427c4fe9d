//! Named random substreams and content hashing.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from
//! one root seed and a stream name (`"init"`, `"shuffle"`, `"generator"`),
//! so changing how one consumer draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    substream_indexed(seed, name, 0)
}

pub fn substream_indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}
