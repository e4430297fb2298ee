//! Key hashing shared by segment selection, probing and node ownership.

use std::fmt;

/// 64-bit hash of a key.
///
/// Every node and thread must agree on this value for a given key, so it
/// comes from one fixed, seedless function ([`hash_key`]).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HashValue(pub u64);

impl HashValue {
    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for HashValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashValue({:#018x})", self.0)
    }
}

impl From<u64> for HashValue {
    fn from(v: u64) -> Self {
        HashValue(v)
    }
}

/// Hashes key bytes with XXH3-64 (seed 0).
#[inline]
pub fn hash_key(key: &[u8]) -> HashValue {
    HashValue(xxhash_rust::xxh3::xxh3_64(key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_across_calls() {
        assert_eq!(hash_key(b"hello"), hash_key(b"hello"));
        assert_ne!(hash_key(b"hello"), hash_key(b"hellp"));
    }

    #[test]
    fn pinned_values() {
        // Routing depends on these never changing between builds.
        assert_eq!(hash_key(b""), HashValue(0x2d06800538d394c2));
    }
}
