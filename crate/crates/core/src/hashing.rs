//! Stable 64-bit hashing for seed derivation.
//!
//! `std::hash` is not guaranteed stable across releases, so reproducible
//! per-pair RANSAC seeds are derived with FNV-1a instead.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}
