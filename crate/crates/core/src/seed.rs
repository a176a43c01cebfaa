//! Sub-seed derivation and content hashing.
//!
//! Every random stream is keyed by `(run seed, purpose tag)` so any stage can
//! be re-run in isolation and produce the same values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit seed from a base seed and a purpose tag.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short (16 hex digit) hash of a value's canonical JSON form.
pub fn config_hash<S: serde::Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    content_hash(&json)[..16].to_string()
}


/// Seed and configuration hash stamped into every output artifact.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}
