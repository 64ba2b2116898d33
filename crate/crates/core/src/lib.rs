//! Cooperative topology discovery on a simulated network.
//!
//! A set of monitors traces routes toward a shared destination list while
//! exchanging *stop sets* around a ring, so that no monitor re-probes path
//! segments another monitor has already seen. The crate provides the
//! simulated network ([`topo`]), the probe service ([`probe`]), the stop
//! sets ([`stopset`], [`bloom`]), the per-destination probing engine
//! ([`engine`]), the ring coordinator ([`coordinator`]), the binary message
//! codec ([`wire`]), and the measurement oracle plus reporting ([`metrics`]).

pub mod addr;
pub mod bloom;
pub mod coordinator;
pub mod engine;
pub mod metrics;
pub mod probe;
pub mod stopset;
pub mod topo;
pub mod wire;

pub use addr::Addr;
