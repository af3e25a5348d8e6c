//! Labelled seed derivation. Every random stream in a run is derived from
//! one of the configured 64-bit seeds through SHA-256.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// `SHA-256(label || master || parts...)`, all integers big-endian.
pub fn derive_seed(master: u64, label: &str, parts: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label.len() as u32).to_be_bytes());
    h.update(label.as_bytes());
    h.update(master.to_be_bytes());
    for p in parts {
        h.update(p.to_be_bytes());
    }
    h.finalize().into()
}

pub fn derive_rng(master: u64, label: &str, parts: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(master, label, parts))
}

pub fn derive_u64(master: u64, label: &str, parts: &[u64]) -> u64 {
    let s = derive_seed(master, label, parts);
    u64::from_be_bytes(s[..8].try_into().unwrap())
}
