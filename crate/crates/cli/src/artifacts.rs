//! Run artifacts: what cmd_run writes, what cmd_report reads back. Every
//! file is produced deterministically, so one spec and seed give one byte
//! sequence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use doubletree::coordinator::{run_sequential, run_threaded, AgentStatus, RunOutcome, TimeSource};
use doubletree::engine::TraceRecord;
use doubletree::metrics::{classic_oracle, compute_metrics, render_lines, render_table, MonitorArtifacts, OracleResult};
use doubletree::topo::SimTopology;
use doubletree::Addr;

use crate::errors::{emit, Fail, EXIT_MONITOR_FAILED, EXIT_OK};
use crate::spec::{Resolved, RunMode};

pub const TOPOLOGY_FILE: &str = "topology.txt";
pub const SPEC_COPY_FILE: &str = "spec.toml";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MESSAGES_FILE: &str = "messages.hex";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const REPORT_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Everything cmd_report needs that is not in the records themselves.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub elapsed_secs: u64,
    pub destinations: Vec<Addr>,
    pub monitors: Vec<MonitorSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub monitor: Addr,
    pub status: String,
    pub estimation_probes: u64,
    pub trace_probes: u64,
    pub wait_periods: u32,
    pub window_h: Vec<u8>,
    pub message_bytes: u64,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Fail> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Fail::io(format!("cannot write {}: {e}", path.display())))
}

fn read_file(dir: &Path, name: &str) -> Result<String, Fail> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Fail::io(format!("cannot read {}: {e}", path.display())))
}

fn artifacts_from(outcome: &RunOutcome, monitors: &[Addr]) -> Vec<MonitorArtifacts> {
    monitors
        .iter()
        .enumerate()
        .map(|(j, &monitor)| MonitorArtifacts {
            monitor,
            records: outcome.records[j].clone(),
            message_bytes: outcome.messages[j].iter().map(|f| f.len() as u64).sum(),
            window_h: outcome.stats[j].window_h.clone(),
        })
        .collect()
}

pub fn cmd_run(
    resolved: &Resolved,
    spec_text: &str,
    out_dir: &Path,
    force_sequential: bool,
) -> Result<i32, Fail> {
    let outcome = if force_sequential || resolved.mode == RunMode::Virtual {
        run_sequential(&resolved.topo, &resolved.monitors, &resolved.dests, &resolved.setups, &resolved.cfg)
    } else {
        run_threaded(
            &resolved.topo,
            &resolved.monitors,
            &resolved.dests,
            &resolved.setups,
            &resolved.cfg,
            TimeSource::Wall,
        )
    }
    .map_err(|e| Fail::run(e.to_string()))?;

    fs::create_dir_all(out_dir).map_err(|e| Fail::io(format!("cannot create {}: {e}", out_dir.display())))?;
    write_file(out_dir, TOPOLOGY_FILE, resolved.topo.render().as_bytes())?;
    write_file(out_dir, SPEC_COPY_FILE, spec_text.as_bytes())?;

    let mut records_text = String::new();
    for recs in &outcome.records {
        for r in recs {
            records_text.push_str(&serde_json::to_string(r).expect("record serializes"));
            records_text.push('\n');
        }
    }
    write_file(out_dir, RECORDS_FILE, records_text.as_bytes())?;

    let mut messages_text = String::new();
    for (j, frames) in outcome.messages.iter().enumerate() {
        for f in frames {
            let _ = writeln!(messages_text, "{} {}", resolved.monitors[j], hex::encode(f));
        }
    }
    write_file(out_dir, MESSAGES_FILE, messages_text.as_bytes())?;

    let arts = artifacts_from(&outcome, &resolved.monitors);
    let summary = Summary {
        elapsed_secs: outcome.elapsed,
        destinations: resolved.dests.clone(),
        monitors: resolved
            .monitors
            .iter()
            .enumerate()
            .map(|(j, &monitor)| MonitorSummary {
                monitor,
                status: outcome.statuses[j].to_string(),
                estimation_probes: outcome.stats[j].estimation_probes,
                trace_probes: outcome.stats[j].trace_probes,
                wait_periods: outcome.stats[j].wait_periods,
                window_h: outcome.stats[j].window_h.clone(),
                message_bytes: arts[j].message_bytes,
            })
            .collect(),
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(out_dir, SUMMARY_FILE, summary_json.as_bytes())?;

    let oracle = classic_oracle(&resolved.topo, &resolved.monitors, &resolved.dests)
        .map_err(|e| Fail::run(format!("oracle probing failed: {e}")))?;
    let oracle_json = serde_json::to_string_pretty(&oracle).expect("oracle serializes");
    write_file(out_dir, ORACLE_FILE, oracle_json.as_bytes())?;

    let metrics = compute_metrics(&arts, &oracle);
    write_file(out_dir, REPORT_FILE, render_table(&metrics).as_bytes())?;
    write_file(out_dir, METRICS_FILE, render_lines(&metrics).as_bytes())?;

    for ms in &summary.monitors {
        emit(format_args!(
            "monitor {}: {} (trace probes {}, estimation probes {}, wait periods {})\n",
            ms.monitor, ms.status, ms.trace_probes, ms.estimation_probes, ms.wait_periods
        ))?;
    }
    let unit = if force_sequential || resolved.mode == RunMode::Virtual { "virtual seconds" } else { "seconds" };
    emit(format_args!("elapsed {} {unit}\n", outcome.elapsed))?;
    emit(format_args!("artifacts in {}\n", out_dir.display()))?;

    let all_done = outcome.statuses.iter().all(|s| *s == AgentStatus::Done);
    Ok(if all_done { EXIT_OK } else { EXIT_MONITOR_FAILED })
}

pub fn cmd_oracle(resolved: &Resolved, out_dir: &Path) -> Result<i32, Fail> {
    let oracle = classic_oracle(&resolved.topo, &resolved.monitors, &resolved.dests)
        .map_err(|e| Fail::run(format!("oracle probing failed: {e}")))?;
    fs::create_dir_all(out_dir).map_err(|e| Fail::io(format!("cannot create {}: {e}", out_dir.display())))?;
    let json = serde_json::to_string_pretty(&oracle).expect("oracle serializes");
    write_file(out_dir, ORACLE_FILE, json.as_bytes())?;
    emit(format_args!(
        "oracle: {} nodes, {} links, {} probes over {} monitors x {} destinations\n",
        oracle.nodes.len(),
        oracle.links.len(),
        oracle.probe_count,
        resolved.monitors.len(),
        resolved.dests.len()
    ))?;
    emit(format_args!("artifacts in {}\n", out_dir.display()))?;
    Ok(EXIT_OK)
}

/// Recomputes the report from a run directory's artifacts and prints it.
/// Output is byte-identical to the report.txt the run wrote.
pub fn cmd_report(run_dir: &Path) -> Result<String, Fail> {
    let topo_text = read_file(run_dir, TOPOLOGY_FILE)?;
    let topo = SimTopology::parse(&topo_text).map_err(|e| Fail::topology(format!("{TOPOLOGY_FILE}: {e}")))?;

    let summary: Summary = serde_json::from_str(&read_file(run_dir, SUMMARY_FILE)?)
        .map_err(|e| Fail::artifact(format!("{SUMMARY_FILE}: {e}")))?;

    let mut by_source: BTreeMap<Addr, Vec<TraceRecord>> = BTreeMap::new();
    for (idx, line) in read_file(run_dir, RECORDS_FILE)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(line)
            .map_err(|e| Fail::artifact(format!("{RECORDS_FILE} line {}: {e}", idx + 1)))?;
        by_source.entry(rec.source).or_default().push(rec);
    }

    let monitors: Vec<Addr> = summary.monitors.iter().map(|ms| ms.monitor).collect();
    let arts: Vec<MonitorArtifacts> = summary
        .monitors
        .iter()
        .map(|ms| MonitorArtifacts {
            monitor: ms.monitor,
            records: by_source.remove(&ms.monitor).unwrap_or_default(),
            message_bytes: ms.message_bytes,
            window_h: ms.window_h.clone(),
        })
        .collect();
    if let Some(stray) = by_source.keys().next() {
        return Err(Fail::artifact(format!("{RECORDS_FILE} has records from {stray}, which {SUMMARY_FILE} does not list")));
    }

    let oracle: OracleResult = classic_oracle(&topo, &monitors, &summary.destinations)
        .map_err(|e| Fail::artifact(format!("replaying the oracle failed: {e}")))?;
    let metrics = compute_metrics(&arts, &oracle);
    Ok(render_table(&metrics))
}

/// Output directory precedence: the --out flag, then the spec's `output`
/// entry, then a name derived from the spec file.
pub fn pick_out_dir(flag: Option<PathBuf>, spec_output: Option<PathBuf>, spec_path: &Path) -> PathBuf {
    if let Some(d) = flag {
        return d;
    }
    if let Some(d) = spec_output {
        return d;
    }
    let stem = spec_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    PathBuf::from(format!("{stem}-out"))
}
