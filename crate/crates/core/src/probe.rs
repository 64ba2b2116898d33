//! The probe service the tracing engine talks to: send a probe toward a
//! destination with a TTL, get back the matched reply.
//!
//! Each in-flight probe carries a token modeling the unique UDP source port
//! the reply echoes back. Replies are matched by token *and* echoed
//! destination, never by arrival order; middleboxes that rewrite ports make
//! the token unreliable on its own, and the destination check keeps a
//! mangled reply from ever being delivered to the wrong request. A reply
//! that matches nothing strictly is delivered by destination only when
//! exactly one outstanding request targets that destination, otherwise it
//! is discarded and the request times out.
//!
//! The simulated backend answers synchronously out of a [`SimTopology`]; a
//! real-network backend would implement [`ProbeBackend`] too, which is why
//! the trait exists even though only the simulation is provided.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::addr::Addr;
use crate::topo::{ProbeReply, SimTopology, TopoError};

/// Tokens are allocated in [1, 0x7FFF]; the high bit marks values no
/// allocator ever hands out, which is what token corruption maps into.
const TOKEN_SPACE: u16 = 0x7FFF;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProbeError {
    #[error("token {0} is already outstanding")]
    DuplicateToken(u16),
    #[error("token {0} was never issued")]
    UnknownToken(u16),
    #[error("max outstanding probes ({0}) reached")]
    MaxOutstanding(usize),
    #[error("no free probe token")]
    TokensExhausted,
    #[error(transparent)]
    Topo(#[from] TopoError),
}

/// What actually comes back from the network: possibly corrupted echoes of
/// the token and original destination, plus the reply itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawReply {
    pub token: u16,
    pub echoed_dest: Addr,
    pub reply: ProbeReply,
}

/// An unanswered request the service still tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pending {
    pub dest: Addr,
    pub ttl: u8,
}

/// Where probes go. `observe` returns `None` when nothing ever comes back.
pub trait ProbeBackend: Send {
    fn observe(&mut self, token: u16, dest: Addr, ttl: u8) -> Result<Option<RawReply>, ProbeError>;
}

/// Echo-corruption knobs for the simulated backend, driven by a seeded RNG
/// so runs stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaultModel {
    /// Probability that a reply's echoed token is rewritten to an
    /// un-allocatable value (models source-port rewriting in flight).
    pub corrupt_token: f64,
    /// Probability that a reply's echoed destination is mangled; such
    /// replies must never be delivered.
    pub corrupt_dest: f64,
}

pub struct SimBackend {
    topo: Arc<SimTopology>,
    monitor: Addr,
    fault: FaultModel,
    rng: ChaCha20Rng,
}

impl SimBackend {
    pub fn new(topo: Arc<SimTopology>, monitor: Addr, fault: FaultModel, fault_seed: u64) -> Self {
        SimBackend { topo, monitor, fault, rng: ChaCha20Rng::seed_from_u64(fault_seed) }
    }
}

impl ProbeBackend for SimBackend {
    fn observe(&mut self, token: u16, dest: Addr, ttl: u8) -> Result<Option<RawReply>, ProbeError> {
        let reply = self.topo.probe(self.monitor, dest, ttl)?;
        if matches!(reply, ProbeReply::Timeout) {
            return Ok(None);
        }
        let mut raw = RawReply { token, echoed_dest: dest, reply };
        if self.fault.corrupt_token > 0.0 && self.rng.random_bool(self.fault.corrupt_token) {
            raw.token = token | (TOKEN_SPACE + 1);
        }
        if self.fault.corrupt_dest > 0.0 && self.rng.random_bool(self.fault.corrupt_dest) {
            raw.echoed_dest = Addr(dest.0 ^ 1);
        }
        Ok(Some(raw))
    }
}

/// Strict matching rule: the unique request whose token and destination
/// both agree with the reply's echoes, or none.
pub fn match_reply(outstanding: &HashMap<u16, Pending>, reply: &RawReply) -> Option<u16> {
    outstanding.get(&reply.token).filter(|p| p.dest == reply.echoed_dest).map(|_| reply.token)
}

pub struct ProbeService {
    backend: Box<dyn ProbeBackend>,
    outstanding: HashMap<u16, Pending>,
    arrivals: Vec<RawReply>,
    completed: HashMap<u16, ProbeReply>,
    next_token: u16,
    max_outstanding: usize,
    /// Virtual budget after which an unmatched probe resolves as Timeout.
    /// The simulated backend answers (or stays silent) immediately, so the
    /// budget never actually elapses here; a real backend would honor it.
    pub timeout_ms: u64,
    probes_sent: u64,
}

impl ProbeService {
    pub fn new(backend: Box<dyn ProbeBackend>, max_outstanding: usize, timeout_ms: u64) -> Self {
        ProbeService {
            backend,
            outstanding: HashMap::new(),
            arrivals: Vec::new(),
            completed: HashMap::new(),
            next_token: 0,
            max_outstanding: max_outstanding.max(1),
            timeout_ms,
            probes_sent: 0,
        }
    }

    pub fn simulated(topo: Arc<SimTopology>, monitor: Addr, fault: FaultModel, fault_seed: u64) -> Self {
        Self::new(Box::new(SimBackend::new(topo, monitor, fault, fault_seed)), 64, 2_000)
    }

    pub fn probes_sent(&self) -> u64 {
        self.probes_sent
    }

    fn alloc_token(&mut self) -> Result<u16, ProbeError> {
        for _ in 0..TOKEN_SPACE {
            self.next_token = if self.next_token >= TOKEN_SPACE { 1 } else { self.next_token + 1 };
            if !self.outstanding.contains_key(&self.next_token) && !self.completed.contains_key(&self.next_token) {
                return Ok(self.next_token);
            }
        }
        Err(ProbeError::TokensExhausted)
    }

    /// Sends a probe, leaving it outstanding; the reply (if any) is claimed
    /// later with [`resolve`](Self::resolve). Multiple probes may be in
    /// flight at once, up to the configured cap.
    pub fn begin(&mut self, dest: Addr, ttl: u8) -> Result<u16, ProbeError> {
        let token = self.alloc_token()?;
        self.begin_with_token(token, dest, ttl)?;
        Ok(token)
    }

    /// Like [`begin`](Self::begin) with a caller-chosen token; reusing an
    /// in-flight token is a contract violation.
    pub fn begin_with_token(&mut self, token: u16, dest: Addr, ttl: u8) -> Result<(), ProbeError> {
        if self.outstanding.contains_key(&token) || self.completed.contains_key(&token) {
            return Err(ProbeError::DuplicateToken(token));
        }
        if self.outstanding.len() >= self.max_outstanding {
            return Err(ProbeError::MaxOutstanding(self.max_outstanding));
        }
        self.outstanding.insert(token, Pending { dest, ttl });
        self.probes_sent += 1;
        if let Some(raw) = self.backend.observe(token, dest, ttl)? {
            self.arrivals.push(raw);
        }
        Ok(())
    }

    fn deliver_arrivals(&mut self) {
        for raw in std::mem::take(&mut self.arrivals) {
            let token = match match_reply(&self.outstanding, &raw) {
                Some(t) => t,
                None => {
                    // Token echo is useless; fall back to the destination,
                    // but only when it identifies the request uniquely.
                    let mut candidates =
                        self.outstanding.iter().filter(|(_, p)| p.dest == raw.echoed_dest).map(|(&t, _)| t);
                    match (candidates.next(), candidates.next()) {
                        (Some(t), None) => t,
                        _ => continue, // discarded; the request will time out
                    }
                }
            };
            self.outstanding.remove(&token);
            self.completed.insert(token, raw.reply);
        }
    }

    /// Claims the reply for an issued token. A request whose reply was
    /// never delivered resolves as Timeout once the budget elapses (which
    /// under the simulated backend is immediate).
    pub fn resolve(&mut self, token: u16) -> Result<ProbeReply, ProbeError> {
        self.deliver_arrivals();
        if let Some(reply) = self.completed.remove(&token) {
            return Ok(reply);
        }
        if self.outstanding.remove(&token).is_some() {
            return Ok(ProbeReply::Timeout);
        }
        Err(ProbeError::UnknownToken(token))
    }

    /// Send one probe and wait for its outcome.
    pub fn probe(&mut self, dest: Addr, ttl: u8) -> Result<ProbeReply, ProbeError> {
        let token = self.begin(dest, ttl)?;
        self.resolve(token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn addr(s: &str) -> Addr {
        s.parse().unwrap()
    }

    fn two_dest_topo() -> Arc<SimTopology> {
        Arc::new(
            SimTopology::parse(concat!(
                "1.0.0.1 9.0.0.2 9.0.0.1 9.0.0.2\n",
                "1.0.0.1 8.0.0.3 9.0.0.1 8.0.0.2 8.0.0.3\n",
            ))
            .unwrap(),
        )
    }

    fn service(fault: FaultModel, seed: u64) -> ProbeService {
        ProbeService::simulated(two_dest_topo(), addr("1.0.0.1"), fault, seed)
    }

    #[test]
    fn interleaved_probes_resolve_to_their_own_replies() {
        let mut svc = service(FaultModel::default(), 0);
        let ta = svc.begin(addr("9.0.0.2"), 1).unwrap();
        let tb = svc.begin(addr("8.0.0.3"), 2).unwrap();
        let rb = svc.resolve(tb).unwrap();
        let ra = svc.resolve(ta).unwrap();
        assert_eq!(ra.responder(), Some(addr("9.0.0.1")));
        assert_eq!(rb.responder(), Some(addr("8.0.0.2")));
    }

    #[test]
    fn simulated_backend_delegates_ttl_semantics() {
        let mut svc = service(FaultModel::default(), 0);
        match svc.probe(addr("9.0.0.2"), 1).unwrap() {
            ProbeReply::TimeExceeded { responder, .. } => assert_eq!(responder, addr("9.0.0.1")),
            other => panic!("expected time-exceeded, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_token_still_matches_via_destination() {
        let mut svc = service(FaultModel { corrupt_token: 1.0, corrupt_dest: 0.0 }, 7);
        match svc.probe(addr("9.0.0.2"), 2).unwrap() {
            ProbeReply::DestinationUnreachable { responder, .. } => assert_eq!(responder, addr("9.0.0.2")),
            other => panic!("expected destination-unreachable, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_destination_echo_times_out() {
        let mut svc = service(FaultModel { corrupt_token: 0.0, corrupt_dest: 1.0 }, 7);
        assert_eq!(svc.probe(addr("9.0.0.2"), 1).unwrap(), ProbeReply::Timeout);
    }

    #[test]
    fn duplicate_token_is_a_contract_violation() {
        let mut svc = service(FaultModel::default(), 0);
        svc.begin_with_token(42, addr("9.0.0.2"), 1).unwrap();
        assert_eq!(
            svc.begin_with_token(42, addr("8.0.0.3"), 1),
            Err(ProbeError::DuplicateToken(42))
        );
    }

    #[test]
    fn resolve_of_unissued_token_is_an_error() {
        let mut svc = service(FaultModel::default(), 0);
        assert_eq!(svc.resolve(9), Err(ProbeError::UnknownToken(9)));
    }

    #[test]
    fn outstanding_cap_is_enforced() {
        let mut svc = ProbeService::new(
            Box::new(SimBackend::new(two_dest_topo(), addr("1.0.0.1"), FaultModel::default(), 0)),
            2,
            2_000,
        );
        svc.begin(addr("9.0.0.2"), 1).unwrap();
        svc.begin(addr("9.0.0.2"), 2).unwrap();
        assert_eq!(svc.begin(addr("9.0.0.2"), 3), Err(ProbeError::MaxOutstanding(2)));
    }

    #[test]
    fn match_reply_requires_token_and_destination() {
        let mut outstanding = HashMap::new();
        outstanding.insert(5u16, Pending { dest: addr("9.0.0.2"), ttl: 3 });
        let hit = RawReply {
            token: 5,
            echoed_dest: addr("9.0.0.2"),
            reply: ProbeReply::TimeExceeded { responder: addr("9.0.0.1"), rtt_ms: 1.0 },
        };
        assert_eq!(match_reply(&outstanding, &hit), Some(5));
        let wrong_dest = RawReply { echoed_dest: addr("8.0.0.3"), ..hit };
        assert_eq!(match_reply(&outstanding, &wrong_dest), None);
        let wrong_token = RawReply { token: 6, ..hit };
        assert_eq!(match_reply(&outstanding, &wrong_token), None);
        assert_eq!(match_reply(&HashMap::new(), &hit), None);
    }

    #[test]
    fn ambiguous_destination_fallback_discards() {
        // Two outstanding probes toward the same destination: a reply whose
        // token was corrupted matches neither strictly and both by
        // destination, so it must be dropped, and both probes time out.
        let mut svc = service(FaultModel { corrupt_token: 1.0, corrupt_dest: 0.0 }, 3);
        let t1 = svc.begin(addr("9.0.0.2"), 1).unwrap();
        let t2 = svc.begin(addr("9.0.0.2"), 2).unwrap();
        assert_eq!(svc.resolve(t1).unwrap(), ProbeReply::Timeout);
        assert_eq!(svc.resolve(t2).unwrap(), ProbeReply::Timeout);
    }

    proptest! {
        // Under heavy token corruption, every delivered reply still belongs
        // to the destination it was probed for: misdelivery never happens.
        #[test]
        fn no_misdelivery_under_corruption(seed: u64, corrupt in 0.0f64..=1.0) {
            let mut svc = service(FaultModel { corrupt_token: corrupt, corrupt_dest: 0.0 }, seed);
            for _ in 0..4 {
                let ta = svc.begin(addr("9.0.0.2"), 1).unwrap();
                let tb = svc.begin(addr("8.0.0.3"), 2).unwrap();
                let ra = svc.resolve(ta).unwrap();
                let rb = svc.resolve(tb).unwrap();
                prop_assert_eq!(ra.responder(), Some(addr("9.0.0.1")));
                prop_assert_eq!(rb.responder(), Some(addr("8.0.0.2")));
            }
        }

        #[test]
        fn probe_counter_counts_every_send(n in 1usize..40) {
            let mut svc = service(FaultModel::default(), 0);
            for _ in 0..n {
                svc.probe(addr("9.0.0.2"), 1).unwrap();
            }
            prop_assert_eq!(svc.probes_sent(), n as u64);
        }
    }
}
