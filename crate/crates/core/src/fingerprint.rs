//! Stable content fingerprints for configs and artifacts.

use sha2::{Digest, Sha256};

/// SHA-256 over the `\n`-joined lines, truncated to 16 hex digits.
pub fn hash_lines<I, S>(lines: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_ref().as_bytes());
        hasher.update(b"\n");
    }
    hex16(&hasher.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex16(&Sha256::digest(bytes))
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
