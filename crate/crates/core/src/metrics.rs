//! The comparison harness: an exhaustive classic-probing oracle, coverage
//! and load metrics against it, stopping-reason tables, stop-distance
//! histograms, and message accounting, rendered as aligned text or
//! line-delimited records.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::addr::Addr;
use crate::engine::{HopAddress, StopReason, TraceRecord, GAP_THRESHOLD};
use crate::topo::{ProbeReply, SimTopology, TopoError};

/// What hop-by-hop probing of every (monitor, destination) pair from ttl 1
/// would discover and cost. The baseline every run is judged against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResult {
    pub nodes: BTreeSet<Addr>,
    pub links: BTreeSet<(Addr, Addr)>,
    pub probe_count: u64,
    pub per_interface_visits: BTreeMap<Addr, u64>,
    pub per_destination_probes: BTreeMap<Addr, u64>,
    pub destinations: BTreeSet<Addr>,
}

/// Probes every destination from every monitor at ttl 1, 2, ... until the
/// destination answers or five consecutive hops stay silent. No stop sets,
/// no sharing: the full cost of uncoordinated probing.
pub fn classic_oracle(topo: &SimTopology, monitors: &[Addr], dests: &[Addr]) -> Result<OracleResult, TopoError> {
    let mut res = OracleResult {
        nodes: BTreeSet::new(),
        links: BTreeSet::new(),
        probe_count: 0,
        per_interface_visits: BTreeMap::new(),
        per_destination_probes: BTreeMap::new(),
        destinations: dests.iter().copied().collect(),
    };
    for &monitor in monitors {
        for &dest in dests {
            let mut prev: Option<Addr> = None;
            let mut silent = 0u32;
            for ttl in 1..=u8::MAX {
                let reply = topo.probe(monitor, dest, ttl)?;
                res.probe_count += 1;
                *res.per_destination_probes.entry(dest).or_insert(0) += 1;
                match reply {
                    ProbeReply::Timeout => {
                        prev = None;
                        silent += 1;
                        if silent >= GAP_THRESHOLD {
                            break;
                        }
                    }
                    ProbeReply::TimeExceeded { responder, .. } => {
                        silent = 0;
                        *res.per_interface_visits.entry(responder).or_insert(0) += 1;
                        res.nodes.insert(responder);
                        if let Some(p) = prev {
                            res.links.insert((p, responder));
                        }
                        prev = Some(responder);
                    }
                    ProbeReply::DestinationUnreachable { responder, .. } => {
                        *res.per_interface_visits.entry(responder).or_insert(0) += 1;
                        if let Some(p) = prev {
                            res.links.insert((p, responder));
                        }
                        break;
                    }
                }
            }
        }
    }
    res.nodes.retain(|a| !res.destinations.contains(a));
    Ok(res)
}

/// Per-monitor inputs to metrics computation, independent of how the run
/// was scheduled: its records, the bytes it sent (headers included), and
/// the h it chose per window.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorArtifacts {
    pub monitor: Addr,
    pub records: Vec<TraceRecord>,
    pub message_bytes: u64,
    pub window_h: Vec<u8>,
}

/// Percentage of a monitor's traces that stopped for each reason, one
/// probing direction. Sums to 100 when the monitor has any traces.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReasonPercentages {
    pub normal: f64,
    pub stopset: f64,
    #[serde(rename = "loop")]
    pub loop_: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorStopping {
    pub monitor: Addr,
    pub traces: u64,
    pub backward: ReasonPercentages,
    pub forward: ReasonPercentages,
    pub mean_h: f64,
    pub message_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorHistograms {
    pub monitor: Addr,
    pub backward: BTreeMap<u8, u64>,
    pub forward: BTreeMap<u8, u64>,
}

/// Everything the report shows. Coverage and load are fractions against
/// the oracle; zero denominators render as zero rather than dividing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub nodes_discovered: u64,
    pub links_discovered: u64,
    pub non_responding_count: u64,
    pub invalid_address_count: u64,
    pub node_coverage: f64,
    pub link_coverage: f64,
    pub doubletree_probes: u64,
    pub oracle_probes: u64,
    pub load_reduction: f64,
    pub stopping: Vec<MonitorStopping>,
    pub distance_histograms: Vec<MonitorHistograms>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn percentages(counts: &BTreeMap<StopReason, u64>, total: u64) -> ReasonPercentages {
    let pct = |r: StopReason| {
        if total == 0 {
            0.0
        } else {
            *counts.get(&r).unwrap_or(&0) as f64 / total as f64 * 100.0
        }
    };
    ReasonPercentages {
        normal: pct(StopReason::Normal),
        stopset: pct(StopReason::StopSet),
        loop_: pct(StopReason::Loop),
        gap: pct(StopReason::Gap),
    }
}

/// Distills a run's records and message log into the report numbers.
///
/// A trace contributes one probe per hop entry. A link needs responding
/// hops at adjacent TTLs within one record; a star or a missing TTL breaks
/// the chain. Responding interfaces count as nodes unless they are
/// destinations of the run.
pub fn compute_metrics(arts: &[MonitorArtifacts], oracle: &OracleResult) -> RunMetrics {
    let mut nodes: BTreeSet<Addr> = BTreeSet::new();
    let mut links: BTreeSet<(Addr, Addr)> = BTreeSet::new();
    let mut stars = 0u64;
    let mut invalid: HashSet<Addr> = HashSet::new();
    let mut dt_probes = 0u64;
    let mut stopping = Vec::new();
    let mut histograms = Vec::new();

    for art in arts {
        let mut back_counts: BTreeMap<StopReason, u64> = BTreeMap::new();
        let mut fwd_counts: BTreeMap<StopReason, u64> = BTreeMap::new();
        let mut back_hist: BTreeMap<u8, u64> = BTreeMap::new();
        let mut fwd_hist: BTreeMap<u8, u64> = BTreeMap::new();
        for rec in &art.records {
            dt_probes += rec.hops.len() as u64;
            *back_counts.entry(rec.backward_reason).or_insert(0) += 1;
            *fwd_counts.entry(rec.forward_reason).or_insert(0) += 1;
            *back_hist.entry(rec.backward_stop_distance).or_insert(0) += 1;
            *fwd_hist.entry(rec.forward_stop_distance).or_insert(0) += 1;
            let mut prev: Option<(u8, Addr)> = None;
            for hop in &rec.hops {
                match hop.addresses.first() {
                    Some(&HopAddress::Known(a)) => {
                        if a.is_invalid() {
                            invalid.insert(a);
                        }
                        if !oracle.destinations.contains(&a) {
                            nodes.insert(a);
                        }
                        if let Some((pttl, paddr)) = prev {
                            // When h overshoots a short route the destination
                            // answers at h and again at its true distance;
                            // equal endpoints are one interface, not a link.
                            if hop.ttl == pttl + 1 && paddr != a {
                                links.insert((paddr, a));
                            }
                        }
                        prev = Some((hop.ttl, a));
                    }
                    Some(&HopAddress::Star) => {
                        stars += 1;
                        prev = None;
                    }
                    None => prev = None,
                }
            }
        }
        let traces = art.records.len() as u64;
        let mean_h = if art.window_h.is_empty() {
            0.0
        } else {
            art.window_h.iter().map(|&h| h as f64).sum::<f64>() / art.window_h.len() as f64
        };
        stopping.push(MonitorStopping {
            monitor: art.monitor,
            traces,
            backward: percentages(&back_counts, traces),
            forward: percentages(&fwd_counts, traces),
            mean_h,
            message_bytes: art.message_bytes,
        });
        histograms.push(MonitorHistograms { monitor: art.monitor, backward: back_hist, forward: fwd_hist });
    }

    let covered_nodes = nodes.intersection(&oracle.nodes).count() as u64;
    let covered_links = links.intersection(&oracle.links).count() as u64;
    let load_reduction = if oracle.probe_count == 0 { 0.0 } else { 1.0 - dt_probes as f64 / oracle.probe_count as f64 };
    RunMetrics {
        nodes_discovered: nodes.len() as u64,
        links_discovered: links.len() as u64,
        non_responding_count: stars,
        invalid_address_count: invalid.len() as u64,
        node_coverage: ratio(covered_nodes, oracle.nodes.len() as u64),
        link_coverage: ratio(covered_links, oracle.links.len() as u64),
        doubletree_probes: dt_probes,
        oracle_probes: oracle.probe_count,
        load_reduction,
        stopping,
        distance_histograms: histograms,
    }
}

/// Aligned-text report. Contains no paths or clock readings, so identical
/// metrics render to identical bytes.
pub fn render_table(m: &RunMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== discovery ==");
    let _ = writeln!(out, "nodes                {}", m.nodes_discovered);
    let _ = writeln!(out, "links                {}", m.links_discovered);
    let _ = writeln!(out, "non-responding hops  {}", m.non_responding_count);
    let _ = writeln!(out, "invalid addresses    {}", m.invalid_address_count);
    let _ = writeln!(out);
    let _ = writeln!(out, "== versus classic probing ==");
    let _ = writeln!(out, "node coverage   {:.4}", m.node_coverage);
    let _ = writeln!(out, "link coverage   {:.4}", m.link_coverage);
    let _ = writeln!(out, "probes          {} / {}", m.doubletree_probes, m.oracle_probes);
    let _ = writeln!(out, "load reduction  {:.4}", m.load_reduction);
    let _ = writeln!(out);
    let _ = writeln!(out, "== stopping reasons (%) and mean h ==");
    let _ = writeln!(
        out,
        "{:<16} {:<10} {:>7} {:>8} {:>6} {:>6} {:>7}",
        "monitor", "direction", "normal", "stopset", "loop", "gap", "mean-h"
    );
    for row in &m.stopping {
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>7.2} {:>8.2} {:>6.2} {:>6.2} {:>7.2}",
            row.monitor.to_string(),
            "backwards",
            row.backward.normal,
            row.backward.stopset,
            row.backward.loop_,
            row.backward.gap,
            row.mean_h,
        );
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>7.2} {:>8.2} {:>6.2} {:>6.2} {:>7}",
            row.monitor.to_string(),
            "forwards",
            row.forward.normal,
            row.forward.stopset,
            row.forward.loop_,
            row.forward.gap,
            "",
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "== messages ==");
    let _ = writeln!(out, "{:<16} {:>10}", "monitor", "bytes");
    for row in &m.stopping {
        let _ = writeln!(out, "{:<16} {:>10}", row.monitor.to_string(), row.message_bytes);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "== stop distances ==");
    let _ = writeln!(out, "{:<16} {:<10} {:>8} {:>7}", "monitor", "direction", "distance", "count");
    for h in &m.distance_histograms {
        for (d, c) in &h.backward {
            let _ = writeln!(out, "{:<16} {:<10} {:>8} {:>7}", h.monitor.to_string(), "backwards", d, c);
        }
        for (d, c) in &h.forward {
            let _ = writeln!(out, "{:<16} {:<10} {:>8} {:>7}", h.monitor.to_string(), "forwards", d, c);
        }
    }
    out
}

/// Line-delimited structured form of the same numbers, one record per
/// line, for plotting pipelines.
pub fn render_lines(m: &RunMetrics) -> String {
    let mut out = String::new();
    let summary = serde_json::json!({
        "kind": "summary",
        "nodes": m.nodes_discovered,
        "links": m.links_discovered,
        "non_responding": m.non_responding_count,
        "invalid": m.invalid_address_count,
        "node_coverage": m.node_coverage,
        "link_coverage": m.link_coverage,
        "doubletree_probes": m.doubletree_probes,
        "oracle_probes": m.oracle_probes,
        "load_reduction": m.load_reduction,
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    for row in &m.stopping {
        let line = serde_json::json!({
            "kind": "stopping",
            "monitor": row.monitor,
            "traces": row.traces,
            "backward": row.backward,
            "forward": row.forward,
            "mean_h": row.mean_h,
            "message_bytes": row.message_bytes,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    for h in &m.distance_histograms {
        for (direction, hist) in [("backwards", &h.backward), ("forwards", &h.forward)] {
            for (d, c) in hist {
                let line = serde_json::json!({
                    "kind": "distance",
                    "monitor": h.monitor,
                    "direction": direction,
                    "distance": d,
                    "count": c,
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
    }
    out
}
