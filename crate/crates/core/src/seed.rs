//! Seeds derived from names, so that per-client and per-round randomness is
//! reproducible without coordination.

use sha2::{Digest, Sha256};

/// First eight bytes of SHA-256 over the length-prefixed parts.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
