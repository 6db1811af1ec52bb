use sha2::{Digest, Sha256};

/// Name recorded in ledger headers.
pub const HASH_ALGORITHM: &str = "SHA-256";

/// Lowercase hex SHA-256.
pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}
