//! Bloom filter keyed on 8-byte stop-set pairs.
//!
//! The k hash positions come from a single SHA-1 digest of the key: the
//! 160-bit digest is split into five consecutive big-endian 32-bit words and
//! each word is reduced mod m. One digest therefore supports at most k = 5.

use sha1::{Digest, Sha1};

/// Upper bound on `k`: one SHA-1 digest yields five 32-bit words.
pub const MAX_HASHES: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BloomError {
    #[error("bloom parameters m={m} k={k} out of range (need m >= 1, 1 <= k <= 5)")]
    BadParams { m: u32, k: u32 },
    #[error("bloom update of {got} bytes does not match descriptor m={m} (expected {expected} bytes)")]
    BadUpdateLength { m: u32, expected: usize, got: usize },
    #[error("cannot merge bloom filters with different parameters: (m={m_a}, k={k_a}) vs (m={m_b}, k={k_b})")]
    ParamMismatch { m_a: u32, k_a: u8, m_b: u32, k_b: u8 },
}

/// Fixed-size bit-vector set summary. Bits only ever flip 0 -> 1, so lookups
/// never produce false negatives; false positives occur at a rate set by
/// (m, k) and the number of inserted keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    m_bits: u32,
    k: u8,
    bits: Vec<u8>,
    inserted: u64,
}

/// The k bit positions for a key. Deterministic; indices all in [0, m).
pub fn positions(key: &[u8; 8], m_bits: u32, k: u8) -> Vec<u32> {
    debug_assert!(m_bits >= 1 && (1..=MAX_HASHES).contains(&k));
    let digest = Sha1::digest(key);
    (0..k as usize)
        .map(|i| {
            let word = u32::from_be_bytes(digest[i * 4..i * 4 + 4].try_into().unwrap());
            word % m_bits
        })
        .collect()
}

impl BloomFilter {
    pub fn new(m_bits: u32, k: u8) -> Result<Self, BloomError> {
        if m_bits == 0 || k == 0 || k > MAX_HASHES {
            return Err(BloomError::BadParams { m: m_bits, k: k as u32 });
        }
        Ok(BloomFilter { m_bits, k, bits: vec![0; (m_bits as usize).div_ceil(8)], inserted: 0 })
    }

    pub fn m_bits(&self) -> u32 {
        self.m_bits
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    /// Keys registered so far (duplicates and false-positive collisions not
    /// counted: an insert that finds all its bits already set is a no-op).
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    fn bit(&self, pos: u32) -> bool {
        self.bits[pos as usize / 8] & (0x80 >> (pos % 8)) != 0
    }

    fn set_bit(&mut self, pos: u32) {
        self.bits[pos as usize / 8] |= 0x80 >> (pos % 8);
    }

    pub fn contains(&self, key: &[u8; 8]) -> bool {
        positions(key, self.m_bits, self.k).into_iter().all(|p| self.bit(p))
    }

    /// Inserts the key. Returns true when the membership test was false
    /// beforehand, i.e. the key was (as far as the filter knows) new.
    pub fn insert(&mut self, key: &[u8; 8]) -> bool {
        let mut was_member = true;
        for p in positions(key, self.m_bits, self.k) {
            if !self.bit(p) {
                was_member = false;
                self.set_bit(p);
            }
        }
        if !was_member {
            self.inserted += 1;
        }
        !was_member
    }

    /// ORs another filter of identical parameters into this one.
    pub fn union_with(&mut self, other: &BloomFilter) -> Result<(), BloomError> {
        if self.m_bits != other.m_bits || self.k != other.k {
            return Err(BloomError::ParamMismatch {
                m_a: self.m_bits,
                k_a: self.k,
                m_b: other.m_bits,
                k_b: other.k,
            });
        }
        for (dst, src) in self.bits.iter_mut().zip(&other.bits) {
            *dst |= src;
        }
        self.inserted += other.inserted;
        Ok(())
    }

    /// Update-bytes form: 4 bytes of m, 4 bytes of k (big-endian), then the
    /// bit vector, most significant bit of each byte first.
    pub fn to_update_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len());
        out.extend_from_slice(&self.m_bits.to_be_bytes());
        out.extend_from_slice(&(self.k as u32).to_be_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    /// Expected update-bytes length for a filter of `m_bits`.
    pub fn update_len(m_bits: u32) -> usize {
        8 + (m_bits as usize).div_ceil(8)
    }

    pub fn from_update_bytes(bytes: &[u8]) -> Result<Self, BloomError> {
        if bytes.len() < 8 {
            return Err(BloomError::BadUpdateLength { m: 0, expected: 8, got: bytes.len() });
        }
        let m_bits = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let k = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
        if m_bits == 0 || k == 0 || k > MAX_HASHES as u32 {
            return Err(BloomError::BadParams { m: m_bits, k });
        }
        let expected = Self::update_len(m_bits);
        if bytes.len() != expected {
            return Err(BloomError::BadUpdateLength { m: m_bits, expected, got: bytes.len() });
        }
        // The inserted count is not carried on the wire; a received filter
        // reports 0 and only the bits matter for merging.
        Ok(BloomFilter { m_bits, k: k as u8, bits: bytes[8..].to_vec(), inserted: 0 })
    }
}
