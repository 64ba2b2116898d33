//! IPv4 addresses as plain 32-bit values, rendered dotted-quad everywhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An IPv4 address. Any 32-bit value is representable.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Addr(pub u32);

impl Addr {
    pub const fn from_octets(a: u8, b: u8, c: u8, d: u8) -> Self {
        Addr(u32::from_be_bytes([a, b, c, d]))
    }

    pub const fn octets(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }

    /// True for addresses that should never show up on a public route:
    /// 0/8, 10/8, 127/8, 172.16/12, 192.168/16. Responding interfaces in
    /// these ranges are counted separately by the metrics.
    pub const fn is_invalid(self) -> bool {
        let [a, b, _, _] = self.octets();
        a == 0 || a == 10 || a == 127 || (a == 172 && b >= 16 && b < 32) || (a == 192 && b == 168)
    }

    /// Keeps the leading `len` bits, zeroing the rest. `len` is clamped to 32.
    pub const fn mask(self, len: u8) -> Addr {
        if len == 0 {
            Addr(0)
        } else if len >= 32 {
            self
        } else {
            Addr(self.0 & (u32::MAX << (32 - len)))
        }
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.octets();
        write!(f, "{a}.{b}.{c}.{d}")
    }
}

impl fmt::Debug for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a dotted-quad IPv4 address: {0:?}")]
pub struct AddrParseError(pub String);

impl FromStr for Addr {
    type Err = AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut octets = [0u8; 4];
        let mut parts = s.split('.');
        for slot in &mut octets {
            let part = parts.next().ok_or_else(|| AddrParseError(s.to_owned()))?;
            // Reject empty, signs, and leading zeros like "01" so rendering round-trips.
            if part.is_empty() || (part.len() > 1 && part.starts_with('0')) {
                return Err(AddrParseError(s.to_owned()));
            }
            *slot = part.parse().map_err(|_| AddrParseError(s.to_owned()))?;
        }
        if parts.next().is_some() {
            return Err(AddrParseError(s.to_owned()));
        }
        Ok(Addr(u32::from_be_bytes(octets)))
    }
}

impl Serialize for Addr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Addr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
