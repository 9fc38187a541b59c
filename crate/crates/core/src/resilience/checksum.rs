//! FNV-1a 64-bit digests over the canonical little-endian serialization of
//! shape then elements. Equal values hash equal; the digest is stable across
//! platforms.

use crate::error::Result;
use crate::value::Value;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Digest of a scalar or dense array value.
pub fn checksum_value(value: &Value) -> Result<u64> {
    Ok(fnv1a64(&value.canonical_bytes()?))
}
