//! Local and global stop sets, and the 8-byte pair serialization shared
//! with the wire format.
//!
//! The local set holds bare interfaces a monitor has itself seen and stops
//! backwards probing. The global set holds (interface, destination-key)
//! pairs contributed by the whole ring and stops forwards probing; it comes
//! in an exact list flavor and a Bloom-filter flavor, and the destination
//! key may be masked to a CIDR prefix so that all destinations in one
//! prefix share entries.

use std::collections::HashSet;

use crate::addr::Addr;
use crate::bloom::{BloomError, BloomFilter};

/// One global stop set entry. `dest_key` is the probed destination, masked
/// to the run's prefix length (32 keeps the full address).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub interface: Addr,
    pub dest_key: Addr,
}

impl PairKey {
    pub fn new(interface: Addr, destination: Addr, prefix_len: u8) -> Self {
        PairKey { interface, dest_key: destination.mask(prefix_len) }
    }

    /// Canonical 8-byte form: 4 bytes interface, 4 bytes destination key,
    /// big-endian. Both the wire format and the Bloom hashes use this.
    pub fn to_bytes(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&self.interface.octets());
        out[4..].copy_from_slice(&self.dest_key.octets());
        out
    }

    pub fn from_bytes(bytes: [u8; 8]) -> Self {
        PairKey {
            interface: Addr(u32::from_be_bytes(bytes[..4].try_into().unwrap())),
            dest_key: Addr(u32::from_be_bytes(bytes[4..].try_into().unwrap())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StopSetError {
    #[error("pair bytes length {0} is not a multiple of 8")]
    RaggedPairBytes(usize),
    #[error(transparent)]
    Bloom(#[from] BloomError),
    #[error("list-variant stop set cannot merge a Bloom filter update")]
    FilterIntoList,
}

pub fn serialize_update(pairs: &[PairKey]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pairs.len() * 8);
    for p in pairs {
        out.extend_from_slice(&p.to_bytes());
    }
    out
}

pub fn parse_update(bytes: &[u8]) -> Result<Vec<PairKey>, StopSetError> {
    if bytes.len() % 8 != 0 {
        return Err(StopSetError::RaggedPairBytes(bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| PairKey::from_bytes(c.try_into().unwrap())).collect())
}

/// Interfaces this monitor has already seen; grows monotonically.
#[derive(Debug, Clone, Default)]
pub struct LocalStopSet {
    interfaces: HashSet<Addr>,
}

impl LocalStopSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true when the interface was not yet present.
    pub fn insert(&mut self, a: Addr) -> bool {
        self.interfaces.insert(a)
    }

    pub fn contains(&self, a: Addr) -> bool {
        self.interfaces.contains(&a)
    }

    pub fn len(&self) -> usize {
        self.interfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interfaces.is_empty()
    }
}

/// Which representation a run's global stop set uses. Every monitor in a
/// run must use the same one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSetImpl {
    List,
    Bloom { m_bits: u32, k: u8 },
}

#[derive(Debug, Clone)]
enum Repr {
    List(HashSet<PairKey>),
    Bloom(BloomFilter),
}

/// The shared (interface, destination-key) set consulted by forwards
/// probing. The list variant is exact; the Bloom variant trades memory for
/// a tunable false-positive rate and never yields false negatives.
#[derive(Debug, Clone)]
pub struct GlobalStopSet {
    prefix_len: u8,
    repr: Repr,
}

impl GlobalStopSet {
    pub fn new(impl_: StopSetImpl, prefix_len: u8) -> Result<Self, StopSetError> {
        let repr = match impl_ {
            StopSetImpl::List => Repr::List(HashSet::new()),
            StopSetImpl::Bloom { m_bits, k } => Repr::Bloom(BloomFilter::new(m_bits, k)?),
        };
        Ok(GlobalStopSet { prefix_len: prefix_len.min(32), repr })
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    /// Builds the key for a reply from `interface` to a probe toward
    /// `destination`, applying this set's prefix mask.
    pub fn make_key(&self, interface: Addr, destination: Addr) -> PairKey {
        PairKey::new(interface, destination, self.prefix_len)
    }

    pub fn contains(&self, key: &PairKey) -> bool {
        match &self.repr {
            Repr::List(set) => set.contains(key),
            Repr::Bloom(f) => f.contains(&key.to_bytes()),
        }
    }

    /// Inserts the key; returns true when the membership test was false
    /// beforehand. Those are exactly the pairs worth forwarding to the next
    /// monitor.
    pub fn insert(&mut self, key: PairKey) -> bool {
        match &mut self.repr {
            Repr::List(set) => set.insert(key),
            Repr::Bloom(f) => f.insert(&key.to_bytes()),
        }
    }

    /// Merges a received pair-list update. Idempotent.
    pub fn merge_pairs(&mut self, pairs: &[PairKey]) {
        for p in pairs {
            self.insert(*p);
        }
    }

    /// Merges a received Bloom-filter update (Bloom variant only).
    pub fn merge_filter(&mut self, filter: &BloomFilter) -> Result<(), StopSetError> {
        match &mut self.repr {
            Repr::List(_) => Err(StopSetError::FilterIntoList),
            Repr::Bloom(f) => Ok(f.union_with(filter)?),
        }
    }

    /// Exact entry count for the list variant; registered-key count for the
    /// Bloom variant.
    pub fn len(&self) -> u64 {
        match &self.repr {
            Repr::List(set) => set.len() as u64,
            Repr::Bloom(f) => f.inserted(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
