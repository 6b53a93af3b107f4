//! Deterministic random stream derivation.
//!
//! All randomness in the crate flows from explicit u64 seeds through
//! [`derive_rng`]. A stream is identified by the global seed plus a list of
//! tags (command id, entry index, retry counter, ...), hashed into a ChaCha
//! key. Streams for distinct tag lists are independent for practical
//! purposes, and the mapping is stable across platforms and thread counts,
//! which is what makes whole-pipeline reruns byte-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream tags for the top-level pipeline stages. Kept in one place so two
/// stages can never accidentally share a stream.
pub mod stream {
    pub const CODEC_INIT: u64 = 1;
    pub const TRAIN_BATCH: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const ADAPTER_PAIRS: u64 = 5;
    pub const TARGET_AXIS: u64 = 6;
    pub const CANDIDATE_PICK: u64 = 7;
    pub const SHAPE_SAMPLE: u64 = 8;
    pub const TEXTURE_SAMPLE: u64 = 9;
    pub const PHANTOM: u64 = 10;
    pub const EVAL_NOISE: u64 = 11;
    pub const ASSEMBLY: u64 = 12;
    pub const ADAPTER_NOISE: u64 = 13;
}

/// Derives an independent ChaCha stream from a seed and a tag path.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"lnforge.stream");
    hasher.update(seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Lowercase hex of a byte slice. Used for config and checkpoint digests.
pub fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}
