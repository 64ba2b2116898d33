//! The run-spec file: every experiment knob lives here, so a spec plus its
//! seed reproduces a run exactly. Command-line flags only pick the
//! subcommand, the spec path, and the output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use doubletree::coordinator::{
    MonitorSetup, RunConfig, DEFAULT_MAX_WAIT_PERIODS, DEFAULT_P, DEFAULT_STEP_SIZE, DEFAULT_WAIT_PERIOD_SECS,
    MAX_RING, MAX_SLICES,
};
use doubletree::probe::FaultModel;
use doubletree::stopset::StopSetImpl;
use doubletree::topo::{generate, GeneratorParams, SimTopology};
use doubletree::Addr;

use crate::errors::{Fail, Problems};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub topology: TopologySection,
    #[serde(default)]
    pub monitors: MonitorsSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub fault: FaultSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub routers: Option<u32>,
    pub monitors: Option<u32>,
    pub destinations: Option<u32>,
    pub extra_links: Option<u32>,
    pub non_responder_fraction: Option<f64>,
    pub rtt_range_us: Option<(u32, u32)>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorsSection {
    /// Ring order. Defaults to every monitor in the topology, sorted.
    pub sources: Option<Vec<String>>,
    pub destinations: Option<Vec<String>>,
    /// Monitors that probe but never send updates; starves their successor.
    #[serde(default)]
    pub silent: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub p: Option<f64>,
    pub step_size: Option<usize>,
    pub stop_set: Option<String>,
    pub bloom_bits: Option<u32>,
    pub bloom_hashes: Option<u8>,
    pub prefix_len: Option<u8>,
    pub compress: Option<bool>,
    pub mode: Option<String>,
    pub wait_period_secs: Option<u64>,
    pub max_wait_periods: Option<u32>,
    pub probe_timeout_ms: Option<u64>,
    pub max_outstanding: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            p: None,
            step_size: None,
            stop_set: None,
            bloom_bits: None,
            bloom_hashes: None,
            prefix_len: None,
            compress: None,
            mode: None,
            wait_period_secs: None,
            max_wait_periods: None,
            probe_timeout_ms: None,
            max_outstanding: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub corrupt_token: Option<f64>,
    pub corrupt_dest: Option<f64>,
    pub seed: Option<u64>,
}

/// Scheduler selection. The virtual clock is the default; real time exists
/// to watch the waiting machinery tick at its actual pace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Virtual,
    Real,
}

/// A fully validated experiment, ready to hand to a scheduler.
pub struct Resolved {
    pub topo: Arc<SimTopology>,
    pub monitors: Vec<Addr>,
    pub dests: Vec<Addr>,
    pub setups: Vec<MonitorSetup>,
    pub cfg: RunConfig,
    pub mode: RunMode,
    pub output: Option<PathBuf>,
}

pub fn load_spec(path: &Path) -> Result<RunSpecFile, Fail> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Fail::io(format!("cannot read spec {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Fail::spec_syntax(format!("{}: {e}", path.display())))
}

fn parse_addr_list(kind: &str, raw: &[String], problems: &mut Problems) -> Vec<Addr> {
    let mut out = Vec::new();
    for s in raw {
        match s.parse::<Addr>() {
            Ok(a) => {
                if out.contains(&a) {
                    problems.push("E120", format!("duplicate {kind} address {a}"));
                } else {
                    out.push(a);
                }
            }
            Err(e) => problems.push("E119", format!("{kind} address {s:?}: {e}")),
        }
    }
    out
}

fn check_unit(problems: &mut Problems, code: &'static str, name: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        problems.push(code, format!("{name} is {v}; it must lie in [0, 1]"));
    }
}

/// Validates the whole spec, reporting every problem it can find rather
/// than the first. Relative topology paths resolve against the spec file's
/// directory, so bundled specs work from any working directory.
pub fn resolve(file: &RunSpecFile, spec_dir: &Path) -> Result<Resolved, Vec<Fail>> {
    let mut problems = Problems::default();

    let topo = match (&file.topology.path, &file.topology.generator) {
        (Some(_), Some(_)) => {
            problems.push("E101", "topology gives both a path and generator params; pick one");
            None
        }
        (None, None) => {
            problems.push("E100", "topology needs either a path or generator params");
            None
        }
        (Some(p), None) => {
            let full = if p.is_absolute() { p.clone() } else { spec_dir.join(p) };
            match std::fs::read_to_string(&full) {
                Ok(text) => match SimTopology::parse(&text) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        problems.push("E122", format!("topology {}: {e}", full.display()));
                        None
                    }
                },
                Err(e) => {
                    problems.push("E100", format!("topology {}: {e}", full.display()));
                    None
                }
            }
        }
        (None, Some(g)) => {
            let mut params = GeneratorParams::default();
            if let Some(v) = g.routers {
                params.routers = v;
            }
            if let Some(v) = g.monitors {
                params.monitors = v;
            }
            if let Some(v) = g.destinations {
                params.destinations = v;
            }
            if let Some(v) = g.extra_links {
                params.extra_links = v;
            }
            if let Some(v) = g.non_responder_fraction {
                params.non_responder_fraction = v;
            }
            if let Some(v) = g.rtt_range_us {
                params.rtt_range_us = v;
            }
            match file.seed {
                None => {
                    problems.push("E102", "generator mode needs a top-level seed");
                    None
                }
                Some(seed) => match generate(&params, seed) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        problems.push("E117", format!("generator params: {e}"));
                        None
                    }
                },
            }
        }
    };

    let mut monitors = Vec::new();
    let mut dests = Vec::new();
    if let Some(t) = &topo {
        monitors = match &file.monitors.sources {
            Some(raw) => {
                let list = parse_addr_list("monitor", raw, &mut problems);
                let known = t.monitors();
                for a in &list {
                    if !known.contains(a) {
                        problems.push("E106", format!("monitor {a} is not a monitor in the topology"));
                    }
                }
                list
            }
            None => t.monitors(),
        };
        dests = match &file.monitors.destinations {
            Some(raw) => {
                let list = parse_addr_list("destination", raw, &mut problems);
                let known = t.destinations();
                for a in &list {
                    if !known.contains(a) {
                        problems.push("E107", format!("destination {a} is not a destination in the topology"));
                    }
                }
                list
            }
            None => t.destinations(),
        };
        if monitors.is_empty() {
            problems.push("E103", "no monitors to run");
        }
        if dests.is_empty() {
            problems.push("E104", "no destinations to probe");
        }
    }

    let silent = parse_addr_list("silent", &file.monitors.silent, &mut problems);
    for a in &silent {
        if !monitors.is_empty() && !monitors.contains(a) {
            problems.push("E108", format!("silent address {a} is not a configured monitor"));
        }
    }

    let run = &file.run;
    let p = run.p.unwrap_or(DEFAULT_P);
    check_unit(&mut problems, "E112", "run.p", p);

    let stop_set = match run.stop_set.as_deref().unwrap_or("list") {
        "list" => {
            if run.bloom_bits.is_some() || run.bloom_hashes.is_some() {
                problems.push("E118", "bloom_bits/bloom_hashes given but stop_set is \"list\"");
            }
            StopSetImpl::List
        }
        "bloom" => {
            let m_bits = run.bloom_bits.unwrap_or(1 << 20);
            let k = run.bloom_hashes.unwrap_or(5);
            if m_bits == 0 {
                problems.push("E113", "bloom_bits must be nonzero");
            }
            if k == 0 || k > 5 {
                problems.push("E113", format!("bloom_hashes is {k}; supported range is 1..=5"));
            }
            StopSetImpl::Bloom { m_bits, k }
        }
        other => {
            problems.push("E113", format!("stop_set {other:?}; expected \"list\" or \"bloom\""));
            StopSetImpl::List
        }
    };

    let prefix_len = run.prefix_len.unwrap_or(32);
    if prefix_len == 0 || prefix_len > 32 {
        problems.push("E114", format!("prefix_len is {prefix_len}; supported range is 1..=32"));
    }

    let mode = match run.mode.as_deref().unwrap_or("virtual") {
        "virtual" => RunMode::Virtual,
        "real" => RunMode::Real,
        other => {
            problems.push("E121", format!("mode {other:?}; expected \"virtual\" or \"real\""));
            RunMode::Virtual
        }
    };

    let wait_period_secs = run.wait_period_secs.unwrap_or(DEFAULT_WAIT_PERIOD_SECS);
    let max_wait_periods = run.max_wait_periods.unwrap_or(DEFAULT_MAX_WAIT_PERIODS);
    let probe_timeout_ms = run.probe_timeout_ms.unwrap_or(2_000);
    let max_outstanding = run.max_outstanding.unwrap_or(64);
    for (name, zero) in [
        ("run.wait_period_secs", wait_period_secs == 0),
        ("run.max_wait_periods", max_wait_periods == 0),
        ("run.probe_timeout_ms", probe_timeout_ms == 0),
        ("run.max_outstanding", max_outstanding == 0),
    ] {
        if zero {
            problems.push("E116", format!("{name} must be nonzero"));
        }
    }

    let corrupt_token = file.fault.corrupt_token.unwrap_or(0.0);
    let corrupt_dest = file.fault.corrupt_dest.unwrap_or(0.0);
    check_unit(&mut problems, "E115", "fault.corrupt_token", corrupt_token);
    check_unit(&mut problems, "E115", "fault.corrupt_dest", corrupt_dest);

    // Window geometry. A zero step is wrong no matter the window size;
    // the upper bound needs both list sizes.
    let step_size = run.step_size.unwrap_or(DEFAULT_STEP_SIZE);
    if step_size == 0 {
        problems.push("E109", "step_size must be nonzero");
    }
    if !monitors.is_empty() && !dests.is_empty() {
        let m = monitors.len();
        let n = dests.len();
        if m > MAX_RING {
            problems.push("E111", format!("{m} monitors; the ring holds at most {MAX_RING}"));
        }
        if n < m {
            problems.push("E105", format!("{n} destinations for {m} monitors; every monitor needs a chunk"));
        } else {
            let w = n.div_ceil(m);
            if step_size > w {
                problems.push("E109", format!("step_size {step_size} outside 1..={w} (window size)"));
            } else if step_size > 0 {
                let slices = w.div_ceil(step_size);
                if slices > MAX_SLICES {
                    problems.push("E110", format!("{slices} slices per window; the wire format holds {MAX_SLICES}"));
                }
            }
        }
    }

    problems.into_result()?;

    let topo = Arc::new(topo.expect("validated above"));
    let setups = monitors
        .iter()
        .map(|m| MonitorSetup { stop_set, prefix_len, silent: silent.contains(m) })
        .collect();
    let seed = file.seed.unwrap_or(0);
    let cfg = RunConfig {
        p,
        step_size,
        compress: run.compress.unwrap_or(false),
        wait_period_secs,
        max_wait_periods,
        fault: FaultModel { corrupt_token, corrupt_dest },
        fault_seed: file.fault.seed.unwrap_or(seed),
        max_outstanding,
        probe_timeout_ms,
    };
    Ok(Resolved { topo, monitors, dests, setups, cfg, mode, output: file.output.clone() })
}
