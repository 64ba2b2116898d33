//! Per-destination probing: path-length estimation, h-selection, and the
//! forwards/backwards trace with its four stopping rules.
//!
//! A trace probes forwards from ttl=h (stopping on the destination, a
//! repeated responder, a global stop-set hit, or a run of silent hops) and
//! then backwards from h-1 toward the monitor (stopping on a local
//! stop-set hit, a repeated responder, silence, or ttl 1). Every
//! responding hop contributes an (interface, destination-key) pair to the
//! global set; the pairs that were not already present form the update
//! batch the monitor later shares.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::addr::Addr;
use crate::probe::{ProbeError, ProbeService};
use crate::stopset::{GlobalStopSet, LocalStopSet, PairKey};
use crate::topo::ProbeReply;

/// TTL used by path-length estimation probes.
pub const ESTIMATION_TTL: u8 = 64;
/// Consecutive non-responding hops that end a probing direction.
pub const GAP_THRESHOLD: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("path-length distribution is empty (no destination responded)")]
    EmptyCdf,
    #[error("h must be >= 1")]
    ZeroH,
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Why a probing direction ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Normal,
    StopSet,
    Loop,
    Gap,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::Normal => "normal",
            StopReason::StopSet => "stopset",
            StopReason::Loop => "loop",
            StopReason::Gap => "gap",
        };
        f.write_str(s)
    }
}

/// One probed interface slot: an address, or a star for silence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopAddress {
    Known(Addr),
    Star,
}

impl fmt::Display for HopAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HopAddress::Known(a) => write!(f, "{a}"),
            HopAddress::Star => f.write_str("*"),
        }
    }
}

impl Serialize for HopAddress {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HopAddress {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        if s == "*" {
            return Ok(HopAddress::Star);
        }
        s.parse().map(HopAddress::Known).map_err(D::Error::custom)
    }
}

/// The probes sent at one TTL. The schema allows up to three address
/// slots; this engine sends one probe per TTL, so exactly one is filled.
/// Stars carry no RTT, so `rtts` lists only the responding slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub ttl: u8,
    pub addresses: Vec<HopAddress>,
    pub rtts: Vec<f64>,
}

/// Everything learned about one destination, both probing directions.
/// Field order is part of the record format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub source: Addr,
    pub destination: Addr,
    pub timestamp: u64,
    pub backward_reason: StopReason,
    pub backward_stop_distance: u8,
    pub forward_reason: StopReason,
    pub forward_stop_distance: u8,
    pub hops: Vec<Hop>,
}

/// Empirical distribution of path lengths seen from this monitor.
/// Destinations that never answered contribute to the denominator but to
/// no bucket, so F(max) can stay below 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathLengthCdf {
    counts: BTreeMap<u8, u64>,
    total_queried: u64,
}

impl PathLengthCdf {
    pub fn add_length(&mut self, length: u8) {
        *self.counts.entry(length).or_insert(0) += 1;
        self.total_queried += 1;
    }

    pub fn add_nonresponse(&mut self) {
        self.total_queried += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max_observed(&self) -> Option<u8> {
        self.counts.keys().next_back().copied()
    }

    /// Cumulative fraction of queried destinations at distance <= d.
    pub fn f(&self, d: u8) -> f64 {
        if self.total_queried == 0 {
            return 0.0;
        }
        let mass: u64 = self.counts.range(..=d).map(|(_, c)| c).sum();
        mass as f64 / self.total_queried as f64
    }

    /// Largest h with F(h) <= p, clamped to [1, max observed length].
    /// The clamp floor covers distributions where even F(1) exceeds p;
    /// the ceiling covers p high enough to admit every observed length.
    pub fn choose_h(&self, p: f64) -> Result<u8, EngineError> {
        let max = self.max_observed().ok_or(EngineError::EmptyCdf)?;
        let mut h = 1;
        for d in 1..=max {
            if self.f(d) <= p {
                h = d;
            } else {
                break;
            }
        }
        Ok(h)
    }
}

/// One probe per destination at a fixed high TTL; a reply from the
/// destination reveals the path length from the leftover TTL budget.
pub fn estimate_path_lengths(svc: &mut ProbeService, dests: &[Addr]) -> Result<PathLengthCdf, ProbeError> {
    let mut cdf = PathLengthCdf::default();
    for &dest in dests {
        match svc.probe(dest, ESTIMATION_TTL)? {
            ProbeReply::DestinationUnreachable { remaining_ttl, .. } => {
                cdf.add_length(ESTIMATION_TTL - remaining_ttl + 1);
            }
            // A time-exceeded here means the destination sits beyond the
            // estimation TTL; treat it like silence for length purposes.
            ProbeReply::TimeExceeded { .. } | ProbeReply::Timeout => cdf.add_nonresponse(),
        }
    }
    Ok(cdf)
}

struct TraceState {
    hops: BTreeMap<u8, Hop>,
    seen: HashSet<Addr>,
    new_pairs: Vec<PairKey>,
}

impl TraceState {
    fn record(&mut self, ttl: u8, reply: &ProbeReply) {
        let hop = match reply.responder() {
            Some(r) => Hop { ttl, addresses: vec![HopAddress::Known(r)], rtts: vec![reply.rtt_ms().unwrap()] },
            None => Hop { ttl, addresses: vec![HopAddress::Star], rtts: vec![] },
        };
        self.hops.insert(ttl, hop);
    }
}

/// Trace one destination with both probing phases, updating the stop sets
/// as it goes. Returns the record plus the global-set pairs this trace
/// discovered first (the monitor's share-with-others batch).
pub fn probe_destination(
    svc: &mut ProbeService,
    source: Addr,
    dest: Addr,
    h: u8,
    local: &mut LocalStopSet,
    global: &mut GlobalStopSet,
    timestamp: u64,
) -> Result<(TraceRecord, Vec<PairKey>), EngineError> {
    if h == 0 {
        return Err(EngineError::ZeroH);
    }
    let mut st = TraceState { hops: BTreeMap::new(), seen: HashSet::new(), new_pairs: Vec::new() };

    // Forwards: ttl = h, h+1, ... Every responder's pair enters the global
    // set, the stopping hop included. The loop test must run before the
    // stop-set test: this trace's own insertions would otherwise mask a
    // revisited interface as a stop-set hit.
    let mut gap = 0u32;
    let mut ttl = h;
    let (forward_reason, forward_stop_distance) = loop {
        let reply = svc.probe(dest, ttl)?;
        st.record(ttl, &reply);
        match reply {
            ProbeReply::Timeout => {
                gap += 1;
                if gap >= GAP_THRESHOLD {
                    break (StopReason::Gap, ttl);
                }
            }
            ProbeReply::DestinationUnreachable { responder, .. } => {
                st.seen.insert(responder);
                let key = global.make_key(responder, dest);
                if global.insert(key) {
                    st.new_pairs.push(key);
                }
                break (StopReason::Normal, ttl);
            }
            ProbeReply::TimeExceeded { responder, .. } => {
                gap = 0;
                let looped = !st.seen.insert(responder);
                let key = global.make_key(responder, dest);
                let newly = global.insert(key);
                if newly {
                    st.new_pairs.push(key);
                }
                if looped {
                    break (StopReason::Loop, ttl);
                }
                if !newly {
                    break (StopReason::StopSet, ttl);
                }
            }
        }
        if ttl == u8::MAX {
            break (StopReason::Gap, ttl);
        }
        ttl += 1;
    };

    // Backwards: ttl = h-1 down to 1, skipped when h = 1. Responders join
    // the monitor's local set (and the global set); only the local set is
    // consulted for stopping, and exactly, even when the global set is a
    // filter.
    let (backward_reason, backward_stop_distance) = if h == 1 {
        (StopReason::Normal, 0)
    } else {
        let mut gap = 0u32;
        let mut ttl = h - 1;
        loop {
            let reply = svc.probe(dest, ttl)?;
            st.record(ttl, &reply);
            let mut stop = None;
            match reply {
                ProbeReply::Timeout => {
                    gap += 1;
                    if gap >= GAP_THRESHOLD {
                        stop = Some(StopReason::Gap);
                    }
                }
                ProbeReply::TimeExceeded { responder, .. } | ProbeReply::DestinationUnreachable { responder, .. } => {
                    gap = 0;
                    let looped = !st.seen.insert(responder);
                    let known_here = !local.insert(responder);
                    let key = global.make_key(responder, dest);
                    if global.insert(key) {
                        st.new_pairs.push(key);
                    }
                    if looped {
                        stop = Some(StopReason::Loop);
                    } else if known_here {
                        stop = Some(StopReason::StopSet);
                    }
                }
            }
            if let Some(reason) = stop {
                break (reason, ttl);
            }
            if ttl == 1 {
                break (StopReason::Normal, 1);
            }
            ttl -= 1;
        }
    };

    let record = TraceRecord {
        source,
        destination: dest,
        timestamp,
        backward_reason,
        backward_stop_distance,
        forward_reason,
        forward_stop_distance,
        hops: st.hops.into_values().collect(),
    };
    Ok((record, st.new_pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::FaultModel;
    use crate::stopset::StopSetImpl;
    use crate::topo::SimTopology;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn addr(s: &str) -> Addr {
        s.parse().unwrap()
    }

    fn service_for(text: &str, monitor: &str) -> ProbeService {
        let topo = Arc::new(SimTopology::parse(text).unwrap());
        ProbeService::simulated(topo, addr(monitor), FaultModel::default(), 0)
    }

    const CHAIN: &str = "1.0.0.1 9.0.0.4 9.0.0.1 9.0.0.2 9.0.0.3 9.0.0.4\n";

    fn sets() -> (LocalStopSet, GlobalStopSet) {
        (LocalStopSet::new(), GlobalStopSet::new(StopSetImpl::List, 32).unwrap())
    }

    #[test]
    fn h1_walks_the_whole_route_forward_only() {
        let mut svc = service_for(CHAIN, "1.0.0.1");
        let (mut local, mut global) = sets();
        let (rec, pairs) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.4"), 1, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.forward_reason, StopReason::Normal);
        assert_eq!(rec.forward_stop_distance, 4);
        assert_eq!(rec.backward_reason, StopReason::Normal);
        assert_eq!(rec.backward_stop_distance, 0);
        assert_eq!(rec.hops.len(), 4);
        assert_eq!(rec.hops[0].ttl, 1);
        assert_eq!(rec.hops[0].addresses, vec![HopAddress::Known(addr("9.0.0.1"))]);
        assert_eq!(pairs.len(), 4);
        assert_eq!(local.len(), 0);
        assert_eq!(svc.probes_sent(), 4);
    }

    #[test]
    fn global_hit_stops_forward_at_first_probe() {
        let mut svc = service_for(CHAIN, "1.0.0.1");
        let (mut local, mut global) = sets();
        global.merge_pairs(&[global.make_key(addr("9.0.0.3"), addr("9.0.0.4"))]);
        let (rec, pairs) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.4"), 3, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.forward_reason, StopReason::StopSet);
        assert_eq!(rec.forward_stop_distance, 3);
        assert_eq!(rec.backward_reason, StopReason::Normal);
        assert_eq!(rec.backward_stop_distance, 1);
        // Backwards discovered hops 2 and 1; the stopping hop's pair was
        // already known so only the backward pairs are new.
        let expect: Vec<_> = [("9.0.0.2", "9.0.0.4"), ("9.0.0.1", "9.0.0.4")]
            .iter()
            .map(|(i, d)| global.make_key(addr(i), addr(d)))
            .collect();
        assert_eq!(pairs, expect);
        assert!(local.contains(addr("9.0.0.1")) && local.contains(addr("9.0.0.2")));
    }

    #[test]
    fn local_hit_stops_backward() {
        let mut svc = service_for(CHAIN, "1.0.0.1");
        let (mut local, mut global) = sets();
        local.insert(addr("9.0.0.2"));
        let (rec, _) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.4"), 3, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.forward_reason, StopReason::Normal);
        assert_eq!(rec.forward_stop_distance, 4);
        assert_eq!(rec.backward_reason, StopReason::StopSet);
        assert_eq!(rec.backward_stop_distance, 2);
        // ttl 1 never probed: hops are 2,3,4.
        assert_eq!(rec.hops.iter().map(|hp| hp.ttl).collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn backward_ignores_global_set() {
        let mut svc = service_for(CHAIN, "1.0.0.1");
        let (mut local, mut global) = sets();
        global.merge_pairs(&[global.make_key(addr("9.0.0.2"), addr("9.0.0.4"))]);
        let (rec, _) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.4"), 3, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.backward_reason, StopReason::Normal);
        assert_eq!(rec.backward_stop_distance, 1);
    }

    #[test]
    fn five_silent_hops_stop_with_gap() {
        // Hops at distances 3..7 are non-responders; probing at h=3 sees
        // five stars and gives up at distance 7.
        let mut text = String::from("1.0.0.1 9.0.0.9 9.0.0.1 9.0.0.2 9.0.0.3 9.0.0.4 9.0.0.5 9.0.0.6 9.0.0.7 9.0.0.8 9.0.0.9\n");
        for hop in ["9.0.0.3", "9.0.0.4", "9.0.0.5", "9.0.0.6", "9.0.0.7"] {
            text.push_str(&format!("nonresponder {hop}\n"));
        }
        let mut svc = service_for(&text, "1.0.0.1");
        let (mut local, mut global) = sets();
        let (rec, _) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.9"), 3, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.forward_reason, StopReason::Gap);
        assert_eq!(rec.forward_stop_distance, 7);
        let stars = rec.hops.iter().filter(|hp| hp.addresses == vec![HopAddress::Star]).count();
        assert_eq!(stars, 5);
        assert!(rec.hops.iter().filter(|hp| hp.ttl >= 3).all(|hp| hp.rtts.is_empty()));
    }

    #[test]
    fn overshooting_h_loops_backward_onto_the_destination() {
        let mut svc = service_for(CHAIN, "1.0.0.1");
        let (mut local, mut global) = sets();
        let (rec, _) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.4"), 6, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.forward_reason, StopReason::Normal);
        assert_eq!(rec.forward_stop_distance, 6);
        assert_eq!(rec.backward_reason, StopReason::Loop);
        assert_eq!(rec.backward_stop_distance, 5);
    }

    #[test]
    fn repeated_responder_stops_forward_with_loop() {
        let text = "1.0.0.1 9.0.0.4 9.0.0.1 9.0.0.2 9.0.0.1 9.0.0.4\n";
        let mut svc = service_for(text, "1.0.0.1");
        let (mut local, mut global) = sets();
        let (rec, _) =
            probe_destination(&mut svc, addr("1.0.0.1"), addr("9.0.0.4"), 1, &mut local, &mut global, 0).unwrap();
        assert_eq!(rec.forward_reason, StopReason::Loop);
        assert_eq!(rec.forward_stop_distance, 3);
    }

    #[test]
    fn cdf_example_two_lengths() {
        let mut cdf = PathLengthCdf::default();
        cdf.add_length(3);
        cdf.add_length(5);
        assert_eq!(cdf.f(3), 0.5);
        assert_eq!(cdf.f(4), 0.5);
        assert_eq!(cdf.f(5), 1.0);
        assert_eq!(cdf.f(2), 0.0);
        assert_eq!(cdf.choose_h(1.0).unwrap(), 5);
        assert_eq!(cdf.choose_h(0.5).unwrap(), 4);
        assert_eq!(cdf.choose_h(0.05).unwrap(), 2);
    }

    #[test]
    fn h_selection_bracketing_example() {
        // 20% of destinations within 12 hops, the rest at 13:
        // F(12) = 0.2 <= p < F(13) picks h = 12.
        let mut cdf = PathLengthCdf::default();
        for _ in 0..20 {
            cdf.add_length(12);
        }
        for _ in 0..80 {
            cdf.add_length(13);
        }
        assert_eq!(cdf.choose_h(0.2).unwrap(), 12);
    }

    #[test]
    fn h_floors_at_one_when_first_hop_exceeds_p() {
        let mut cdf = PathLengthCdf::default();
        cdf.add_length(1);
        cdf.add_length(2);
        assert_eq!(cdf.f(1), 0.5);
        assert_eq!(cdf.choose_h(0.05).unwrap(), 1);
    }

    #[test]
    fn empty_cdf_is_an_error() {
        let mut cdf = PathLengthCdf::default();
        assert_eq!(cdf.choose_h(0.05), Err(EngineError::EmptyCdf));
        cdf.add_nonresponse();
        assert_eq!(cdf.choose_h(0.05), Err(EngineError::EmptyCdf));
    }

    #[test]
    fn nonresponders_dilute_the_cdf() {
        let mut cdf = PathLengthCdf::default();
        cdf.add_length(3);
        cdf.add_nonresponse();
        assert_eq!(cdf.f(3), 0.5);
        assert_eq!(cdf.f(200), 0.5);
        assert_eq!(cdf.choose_h(0.6).unwrap(), 3);
    }

    #[test]
    fn estimation_reads_lengths_from_remaining_ttl() {
        let text = concat!(
            "1.0.0.1 9.0.0.2 9.0.0.1 9.0.0.2\n",
            "1.0.0.1 8.0.0.4 9.0.0.1 8.0.0.2 8.0.0.3 8.0.0.4\n",
            "1.0.0.1 7.0.0.2 9.0.0.1 7.0.0.2\n",
            "nonresponder 7.0.0.2\n",
        );
        let mut svc = service_for(text, "1.0.0.1");
        let cdf = estimate_path_lengths(&mut svc, &[addr("9.0.0.2"), addr("8.0.0.4"), addr("7.0.0.2")]).unwrap();
        assert_eq!(cdf.f(2), 1.0 / 3.0);
        assert_eq!(cdf.f(4), 2.0 / 3.0);
        assert_eq!(cdf.max_observed(), Some(4));
        assert_eq!(svc.probes_sent(), 3);
    }

    #[test]
    fn record_serializes_with_fixed_field_order() {
        let rec = TraceRecord {
            source: addr("1.0.0.1"),
            destination: addr("9.0.0.2"),
            timestamp: 60,
            backward_reason: StopReason::Normal,
            backward_stop_distance: 0,
            forward_reason: StopReason::StopSet,
            forward_stop_distance: 2,
            hops: vec![
                Hop { ttl: 1, addresses: vec![HopAddress::Known(addr("9.0.0.1"))], rtts: vec![1.25] },
                Hop { ttl: 2, addresses: vec![HopAddress::Star], rtts: vec![] },
            ],
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            json,
            concat!(
                "{\"source\":\"1.0.0.1\",\"destination\":\"9.0.0.2\",\"timestamp\":60,",
                "\"backward_reason\":\"normal\",\"backward_stop_distance\":0,",
                "\"forward_reason\":\"stopset\",\"forward_stop_distance\":2,",
                "\"hops\":[{\"ttl\":1,\"addresses\":[\"9.0.0.1\"],\"rtts\":[1.25]},",
                "{\"ttl\":2,\"addresses\":[\"*\"],\"rtts\":[]}]}",
            )
        );
        let back: TraceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn stop_reasons_serialize_lowercase() {
        for (reason, text) in [
            (StopReason::Normal, "\"normal\""),
            (StopReason::StopSet, "\"stopset\""),
            (StopReason::Loop, "\"loop\""),
            (StopReason::Gap, "\"gap\""),
        ] {
            assert_eq!(serde_json::to_string(&reason).unwrap(), text);
            assert_eq!(serde_json::from_str::<StopReason>(text).unwrap(), reason);
        }
    }

    proptest! {
        // On generated topologies the two distances always bracket h.
        #[test]
        fn stop_distances_bracket_h(seed: u64, h in 1u8..12) {
            let params = crate::topo::GeneratorParams {
                routers: 15,
                monitors: 1,
                destinations: 8,
                extra_links: 3,
                ..Default::default()
            };
            let topo = Arc::new(crate::topo::generate(&params, seed).unwrap());
            let monitor = topo.monitors()[0];
            let dests = topo.destinations();
            let mut svc = ProbeService::simulated(topo.clone(), monitor, FaultModel::default(), 0);
            let (mut local, mut global) = sets();
            for dest in dests {
                let (rec, _) =
                    probe_destination(&mut svc, monitor, dest, h, &mut local, &mut global, 0).unwrap();
                prop_assert!(rec.forward_stop_distance >= h);
                if h > 1 {
                    prop_assert!(rec.backward_stop_distance < h);
                } else {
                    prop_assert_eq!(rec.backward_stop_distance, 0);
                }
                let ttls: Vec<u8> = rec.hops.iter().map(|hp| hp.ttl).collect();
                let mut sorted = ttls.clone();
                sorted.sort_unstable();
                prop_assert_eq!(ttls, sorted);
            }
        }

        #[test]
        fn choose_h_is_within_observed_range(lengths in proptest::collection::vec(1u8..40, 1..50), p in 0.0f64..=1.0) {
            let mut cdf = PathLengthCdf::default();
            for &l in &lengths {
                cdf.add_length(l);
            }
            let h = cdf.choose_h(p).unwrap();
            let max = cdf.max_observed().unwrap();
            prop_assert!(h >= 1 && h <= max);
            // h respects the defining inequality whenever F(h) <= p holds
            // anywhere; otherwise it floors at 1.
            if cdf.f(1) > p {
                prop_assert_eq!(h, 1);
            } else {
                prop_assert!(cdf.f(h) <= p);
                if h < max {
                    prop_assert!(cdf.f(h + 1) > p);
                }
            }
        }
    }
}
