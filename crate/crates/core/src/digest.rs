//! Content digests used for manifests, fixture keys and memoization.

use sha2::{Digest, Sha256};
use std::io::{self, Read};
use std::path::Path;

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hex-encoded SHA-256 of a file's contents, streamed.
pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Stable 64-bit seed derived from a string, for mixing ids into RNG seeds.
pub fn seed_from_str(seed: u64, s: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(s.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
