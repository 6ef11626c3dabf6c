//! Content fingerprints (FNV-1a 64) for artifact traceability.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hex fingerprint of a slice of f64 values (bit patterns, in order).
pub fn fingerprint_f64s(values: &[f64]) -> String {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    format!("fnv64:{h:016x}")
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    format!("fnv64:{:016x}", fnv1a64(bytes))
}
