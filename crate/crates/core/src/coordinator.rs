//! The cooperative layer: a ring of monitors working a shared destination
//! list in sliding windows, exchanging stop-set updates slice by slice.
//!
//! The destination list is cut into m chunks of nominal size w = ceil(n/m).
//! Monitor j starts at chunk j and rotates backwards through the list, so
//! at any step the active chunks are pairwise disjoint and after m windows
//! every monitor has covered every destination. Updates flow forward
//! around the ring: what monitor j learned probing chunk c is exactly what
//! monitor j+1 wants merged before it probes c one window later. A slice
//! whose update has not arrived parks the monitor in a waiting state that
//! polls in fixed periods and gives up, marking the run failed, after a
//! configured number of them.
//!
//! Two schedulers drive the same agent state machine: a deterministic
//! sequential one on a virtual clock (the default, and the one golden
//! tests rely on), and a thread-per-monitor one exercising real message
//! passing. Updates travel as encoded wire frames in both.

use std::collections::{HashSet, VecDeque};
use std::ops::Range;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::addr::Addr;
use crate::bloom::BloomFilter;
use crate::engine::{estimate_path_lengths, probe_destination, TraceRecord};
use crate::probe::{FaultModel, ProbeError, ProbeService};
use crate::stopset::{parse_update, serialize_update, GlobalStopSet, LocalStopSet, StopSetError, StopSetImpl};
use crate::topo::SimTopology;
use crate::wire::{decode_stopset, encode_update, CompleteUpdate, UpdateAssembler, WireError};

/// The wire's window field is one byte, so at most 256 chunks (= monitors).
pub const MAX_RING: usize = 256;
/// The wire's slice field is one byte, so at most 256 slices per window.
pub const MAX_SLICES: usize = 256;

pub const DEFAULT_P: f64 = 0.05;
pub const DEFAULT_STEP_SIZE: usize = 10;
pub const DEFAULT_WAIT_PERIOD_SECS: u64 = 30;
pub const DEFAULT_MAX_WAIT_PERIODS: u32 = 40;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoordError {
    #[error("no monitors configured")]
    NoMonitors,
    #[error("no destinations configured")]
    NoDestinations,
    #[error("{n} destinations cannot feed {m} monitors (need n >= m)")]
    FewerDestinationsThanMonitors { n: usize, m: usize },
    #[error("ring of {0} monitors exceeds the {MAX_RING} the window field can address")]
    RingTooLarge(usize),
    #[error("step size {step} outside 1..={w} (window size)")]
    BadStepSize { step: usize, w: usize },
    #[error("{0} slices per window exceed the {MAX_SLICES} the slice field can address")]
    TooManySlices(usize),
    #[error("monitors disagree on stop-set implementation or prefix length")]
    MixedStopSets,
    #[error("{setups} monitor setups for {monitors} monitors")]
    SetupCountMismatch { setups: usize, monitors: usize },
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    StopSet(#[from] StopSetError),
}

impl From<ProbeError> for CoordError {
    fn from(e: ProbeError) -> Self {
        CoordError::Engine(e.into())
    }
}

/// Window geometry shared by every monitor in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub n: usize,
    pub m: usize,
    /// Nominal chunk size; the final chunk may be shorter or empty.
    pub w: usize,
    pub step: usize,
    /// Slices per window, computed on the nominal size so every monitor
    /// agrees; trailing slices of a short chunk may be empty.
    pub slices: usize,
}

/// Validates geometry and fixes the chunk/slice layout for a run.
pub fn plan_windows(n: usize, m: usize, step: usize) -> Result<WindowPlan, CoordError> {
    if m == 0 {
        return Err(CoordError::NoMonitors);
    }
    if n == 0 {
        return Err(CoordError::NoDestinations);
    }
    if n < m {
        return Err(CoordError::FewerDestinationsThanMonitors { n, m });
    }
    if m > MAX_RING {
        return Err(CoordError::RingTooLarge(m));
    }
    let w = n.div_ceil(m);
    if step == 0 || step > w {
        return Err(CoordError::BadStepSize { step, w });
    }
    let slices = w.div_ceil(step);
    if slices > MAX_SLICES {
        return Err(CoordError::TooManySlices(slices));
    }
    Ok(WindowPlan { n, m, w, step, slices })
}

impl WindowPlan {
    /// Destination indices of chunk t; empty when t*w runs past the list.
    pub fn chunk_range(&self, t: usize) -> Range<usize> {
        let start = (t * self.w).min(self.n);
        let end = ((t + 1) * self.w).min(self.n);
        start..end
    }

    /// Which chunk monitor j works during its window k: it starts at its
    /// own chunk and rotates backwards, so its predecessor probed this
    /// chunk one window earlier.
    pub fn chunk_for(&self, monitor: usize, window: usize) -> usize {
        (monitor + self.m - (window % self.m)) % self.m
    }

    /// Destination indices of slice s within chunk t.
    pub fn slice_range(&self, t: usize, s: usize) -> Range<usize> {
        let chunk = self.chunk_range(t);
        let start = (chunk.start + s * self.step).min(chunk.end);
        let end = (chunk.start + (s + 1) * self.step).min(chunk.end);
        start..end
    }
}

/// Per-monitor knobs that must agree across the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorSetup {
    pub stop_set: StopSetImpl,
    pub prefix_len: u8,
    /// A silent monitor probes normally but never sends updates; its
    /// successor starves. Fault injection for the waiting machinery.
    pub silent: bool,
}

impl Default for MonitorSetup {
    fn default() -> Self {
        MonitorSetup { stop_set: StopSetImpl::List, prefix_len: 32, silent: false }
    }
}

/// Run-wide knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub p: f64,
    pub step_size: usize,
    pub compress: bool,
    pub wait_period_secs: u64,
    pub max_wait_periods: u32,
    pub fault: FaultModel,
    pub fault_seed: u64,
    pub max_outstanding: usize,
    pub probe_timeout_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            p: DEFAULT_P,
            step_size: DEFAULT_STEP_SIZE,
            compress: false,
            wait_period_secs: DEFAULT_WAIT_PERIOD_SECS,
            max_wait_periods: DEFAULT_MAX_WAIT_PERIODS,
            fault: FaultModel::default(),
            fault_seed: 0,
            max_outstanding: 64,
            probe_timeout_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentStatus {
    Probing,
    Waiting,
    Done,
    Failed,
}

impl std::fmt::Display for AgentStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AgentStatus::Probing => "probing",
            AgentStatus::Waiting => "waiting",
            AgentStatus::Done => "done",
            AgentStatus::Failed => "failed",
        };
        f.write_str(s)
    }
}

/// Ordered trail of what an agent merged and probed, for auditing the
/// merge-before-probe discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentEvent {
    MergedUpdate { chunk: u8, slice: u8 },
    ProbedSlice { chunk: u8, slice: u8 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitorStats {
    pub estimation_probes: u64,
    pub trace_probes: u64,
    pub wait_periods: u32,
    pub window_h: Vec<u8>,
    pub events: Vec<AgentEvent>,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Final status per monitor, ring order. Only Done or Failed.
    pub statuses: Vec<AgentStatus>,
    pub records: Vec<Vec<TraceRecord>>,
    /// Encoded frames each monitor sent, in send order.
    pub messages: Vec<Vec<Vec<u8>>>,
    pub stats: Vec<MonitorStats>,
    /// Virtual seconds elapsed (sequential) or wall seconds (threaded).
    pub elapsed: u64,
}

enum Phase {
    StartWindow(usize),
    Gate { window: usize, slice: usize },
    ProbeSlice { window: usize, slice: usize },
    Terminal,
}

enum Progress {
    Worked,
    NeedUpdate,
    Finished,
}

struct Agent {
    index: usize,
    source: Addr,
    plan: WindowPlan,
    dests: Arc<Vec<Addr>>,
    svc: ProbeService,
    local: LocalStopSet,
    global: GlobalStopSet,
    stop_set: StopSetImpl,
    p: f64,
    compress: bool,
    silent: bool,
    h: u8,
    phase: Phase,
    waiting: u32,
    max_wait: u32,
    assembler: UpdateAssembler,
    merged: HashSet<(u8, u8)>,
    status: AgentStatus,
    records: Vec<TraceRecord>,
    sent: Vec<Vec<u8>>,
    stats: MonitorStats,
}

impl Agent {
    fn terminal(&self) -> bool {
        matches!(self.status, AgentStatus::Done | AgentStatus::Failed)
    }

    fn fail(&mut self) {
        self.status = AgentStatus::Failed;
        self.phase = Phase::Terminal;
    }

    fn merge_update(&mut self, u: &CompleteUpdate) -> Result<(), CoordError> {
        if u.bloom {
            let filter = BloomFilter::from_update_bytes(&u.content).map_err(StopSetError::from)?;
            self.global.merge_filter(&filter)?;
        } else {
            self.global.merge_pairs(&parse_update(&u.content)?);
        }
        self.merged.insert((u.window, u.slice));
        self.stats.events.push(AgentEvent::MergedUpdate { chunk: u.window, slice: u.slice });
        Ok(())
    }

    /// Pops one frame from the inbox into the assembler, merging any update
    /// it completes. Returns the completed (window, slice), if any.
    fn take_frame(&mut self, inbox: &mut VecDeque<Vec<u8>>) -> Result<Option<(u8, u8)>, CoordError> {
        let Some(frame) = inbox.pop_front() else { return Ok(None) };
        let payload = decode_stopset(&frame)?;
        match self.assembler.push(&payload)? {
            Some(update) => {
                self.merge_update(&update)?;
                Ok(Some((update.window, update.slice)))
            }
            None => Ok(None),
        }
    }

    /// A split pair-list update completes frame by frame; once the awaited
    /// one is seen, its sibling fragments sit contiguously in the inbox
    /// (slices travel as one batch) and must be merged with it.
    fn absorb_siblings(&mut self, inbox: &mut VecDeque<Vec<u8>>, id: (u8, u8)) -> Result<(), CoordError> {
        while let Some(head) = inbox.front() {
            let payload = decode_stopset(head)?;
            if (payload.window, payload.slice) != id {
                break;
            }
            self.take_frame(inbox)?;
        }
        Ok(())
    }

    fn step(&mut self, inbox: &mut VecDeque<Vec<u8>>, now: u64) -> Result<(Progress, Vec<Vec<u8>>), CoordError> {
        match self.phase {
            Phase::Terminal => Ok((Progress::Finished, Vec::new())),
            Phase::StartWindow(k) => {
                if k == self.plan.m {
                    self.status = AgentStatus::Done;
                    self.phase = Phase::Terminal;
                    return Ok((Progress::Finished, Vec::new()));
                }
                let chunk = self.plan.chunk_for(self.index, k);
                let range = self.plan.chunk_range(chunk);
                let window_dests = &self.dests[range];
                let before = self.svc.probes_sent();
                let cdf = estimate_path_lengths(&mut self.svc, window_dests)?;
                self.stats.estimation_probes += self.svc.probes_sent() - before;
                self.h = cdf.choose_h(self.p).unwrap_or(1);
                self.stats.window_h.push(self.h);
                self.phase = Phase::Gate { window: k, slice: 0 };
                Ok((Progress::Worked, Vec::new()))
            }
            Phase::Gate { window, slice } => {
                let chunk = self.plan.chunk_for(self.index, window) as u8;
                let awaited = (chunk, slice as u8);
                // The first window is every monitor's own chunk; nothing to
                // wait for.
                if window == 0 || self.merged.contains(&awaited) {
                    self.waiting = 0;
                    self.status = AgentStatus::Probing;
                    self.phase = Phase::ProbeSlice { window, slice };
                    return Ok((Progress::Worked, Vec::new()));
                }
                // A frame may complete no update (a filter fragment), so
                // drain by inbox emptiness, not by completion.
                while !inbox.is_empty() {
                    if let Some(done) = self.take_frame(inbox)? {
                        if done == awaited {
                            self.absorb_siblings(inbox, awaited)?;
                            self.waiting = 0;
                            self.status = AgentStatus::Probing;
                            self.phase = Phase::ProbeSlice { window, slice };
                            return Ok((Progress::Worked, Vec::new()));
                        }
                    }
                }
                self.status = AgentStatus::Waiting;
                Ok((Progress::NeedUpdate, Vec::new()))
            }
            Phase::ProbeSlice { window, slice } => {
                let chunk = self.plan.chunk_for(self.index, window);
                let range = self.plan.slice_range(chunk, slice);
                self.stats.events.push(AgentEvent::ProbedSlice { chunk: chunk as u8, slice: slice as u8 });
                let before = self.svc.probes_sent();
                let mut slice_pairs = Vec::new();
                for i in range {
                    let dest = self.dests[i];
                    let (record, new_pairs) = probe_destination(
                        &mut self.svc,
                        self.source,
                        dest,
                        self.h,
                        &mut self.local,
                        &mut self.global,
                        now,
                    )?;
                    self.records.push(record);
                    slice_pairs.extend(new_pairs);
                }
                self.stats.trace_probes += self.svc.probes_sent() - before;
                let frames = if self.silent {
                    Vec::new()
                } else {
                    // List mode ships the slice's newly-discovered pairs;
                    // Bloom mode ships a fresh filter holding just those
                    // pairs, which the receiver ORs in.
                    let (bloom, content) = match self.stop_set {
                        StopSetImpl::List => (false, serialize_update(&slice_pairs)),
                        StopSetImpl::Bloom { m_bits, k } => {
                            let mut filter = BloomFilter::new(m_bits, k).map_err(StopSetError::from)?;
                            for pair in &slice_pairs {
                                filter.insert(&pair.to_bytes());
                            }
                            (true, filter.to_update_bytes())
                        }
                    };
                    let frames = encode_update(chunk as u8, slice as u8, bloom, self.compress, &content)?;
                    self.sent.extend(frames.iter().cloned());
                    frames
                };
                self.phase = if slice + 1 < self.plan.slices {
                    Phase::Gate { window, slice: slice + 1 }
                } else {
                    Phase::StartWindow(window + 1)
                };
                Ok((Progress::Worked, frames))
            }
        }
    }

    /// One waiting period elapsed without the awaited update.
    fn tick_wait(&mut self) {
        self.waiting += 1;
        self.stats.wait_periods += 1;
        if self.waiting >= self.max_wait {
            self.fail();
        }
    }
}

fn build_agents(
    topo: &Arc<SimTopology>,
    monitors: &[Addr],
    dests: &Arc<Vec<Addr>>,
    setups: &[MonitorSetup],
    cfg: &RunConfig,
) -> Result<(WindowPlan, Vec<Agent>), CoordError> {
    if setups.len() != monitors.len() {
        return Err(CoordError::SetupCountMismatch { setups: setups.len(), monitors: monitors.len() });
    }
    if let Some(first) = setups.first() {
        if setups.iter().any(|s| s.stop_set != first.stop_set || s.prefix_len != first.prefix_len) {
            return Err(CoordError::MixedStopSets);
        }
    }
    let plan = plan_windows(dests.len(), monitors.len(), cfg.step_size)?;
    let agents = monitors
        .iter()
        .zip(setups)
        .enumerate()
        .map(|(index, (&source, setup))| {
            let backend = crate::probe::SimBackend::new(
                topo.clone(),
                source,
                cfg.fault,
                cfg.fault_seed.wrapping_add(index as u64),
            );
            Ok(Agent {
                index,
                source,
                plan,
                dests: dests.clone(),
                svc: ProbeService::new(Box::new(backend), cfg.max_outstanding, cfg.probe_timeout_ms),
                local: LocalStopSet::new(),
                global: GlobalStopSet::new(setup.stop_set, setup.prefix_len)?,
                stop_set: setup.stop_set,
                p: cfg.p,
                compress: cfg.compress,
                silent: setup.silent,
                h: 1,
                phase: Phase::StartWindow(0),
                waiting: 0,
                max_wait: cfg.max_wait_periods,
                assembler: UpdateAssembler::new(),
                merged: HashSet::new(),
                status: AgentStatus::Probing,
                records: Vec::new(),
                sent: Vec::new(),
                stats: MonitorStats::default(),
            })
        })
        .collect::<Result<Vec<_>, CoordError>>()?;
    Ok((plan, agents))
}

fn collect(agents: Vec<Agent>, elapsed: u64) -> RunOutcome {
    let mut statuses = Vec::new();
    let mut records = Vec::new();
    let mut messages = Vec::new();
    let mut stats = Vec::new();
    for a in agents {
        statuses.push(a.status);
        records.push(a.records);
        messages.push(a.sent);
        stats.push(a.stats);
    }
    RunOutcome { statuses, records, messages, stats, elapsed }
}

/// Deterministic round-robin scheduler on a virtual clock. Message
/// delivery is instant; the clock advances by one waiting period only when
/// every unfinished monitor is starved, which is exactly when a real
/// deployment would be sleeping.
pub fn run_sequential(
    topo: &Arc<SimTopology>,
    monitors: &[Addr],
    dests: &[Addr],
    setups: &[MonitorSetup],
    cfg: &RunConfig,
) -> Result<RunOutcome, CoordError> {
    let dests = Arc::new(dests.to_vec());
    let (_, mut agents) = build_agents(topo, monitors, &dests, setups, cfg)?;
    let m = agents.len();
    let mut mailboxes: Vec<VecDeque<Vec<u8>>> = (0..m).map(|_| VecDeque::new()).collect();
    let mut clock: u64 = 0;
    loop {
        let mut worked = false;
        for j in 0..m {
            if agents[j].terminal() {
                continue;
            }
            let (progress, out) = agents[j].step(&mut mailboxes[j], clock)?;
            if !out.is_empty() {
                mailboxes[(j + 1) % m].extend(out);
            }
            if matches!(progress, Progress::Worked) {
                worked = true;
            }
        }
        if agents.iter().all(|a| a.terminal()) {
            break;
        }
        if !worked {
            clock += cfg.wait_period_secs;
            for a in agents.iter_mut().filter(|a| !a.terminal()) {
                a.tick_wait();
            }
        }
    }
    Ok(collect(agents, clock))
}

/// Timestamp source for the threaded scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSource {
    /// Always zero; makes threaded output comparable to a sequential run.
    Frozen,
    /// Wall-clock seconds since the epoch.
    Wall,
}

fn now_secs(t: TimeSource) -> u64 {
    match t {
        TimeSource::Frozen => 0,
        TimeSource::Wall => SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    }
}

/// Thread-per-monitor scheduler over real channels. Waiting periods are
/// real time, so configure short ones when demonstrating failure. Probing
/// decisions are identical to the sequential scheduler's because updates
/// are merged at the same logical points.
pub fn run_threaded(
    topo: &Arc<SimTopology>,
    monitors: &[Addr],
    dests: &[Addr],
    setups: &[MonitorSetup],
    cfg: &RunConfig,
    time: TimeSource,
) -> Result<RunOutcome, CoordError> {
    let dests = Arc::new(dests.to_vec());
    let (_, agents) = build_agents(topo, monitors, &dests, setups, cfg)?;
    let m = agents.len();
    let start = SystemTime::now();
    let mut txs = Vec::with_capacity(m);
    let mut rxs = Vec::with_capacity(m);
    for _ in 0..m {
        let (tx, rx) = mpsc::channel::<Vec<Vec<u8>>>();
        txs.push(tx);
        rxs.push(rx);
    }
    let wait = Duration::from_secs(cfg.wait_period_secs);
    let mut joined: Vec<Option<Result<Agent, CoordError>>> = (0..m).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(m);
        for (j, mut agent) in agents.into_iter().enumerate() {
            let rx = rxs.remove(0);
            let tx = txs[(j + 1) % m].clone();
            handles.push(scope.spawn(move || -> Result<Agent, CoordError> {
                let mut inbox = VecDeque::new();
                loop {
                    while let Ok(batch) = rx.try_recv() {
                        inbox.extend(batch);
                    }
                    let (progress, out) = agent.step(&mut inbox, now_secs(time))?;
                    if !out.is_empty() {
                        // A finished successor has dropped its receiver;
                        // its loss.
                        let _ = tx.send(out);
                    }
                    match progress {
                        Progress::Worked => {}
                        Progress::Finished => return Ok(agent),
                        Progress::NeedUpdate => match rx.recv_timeout(wait) {
                            Ok(batch) => inbox.extend(batch),
                            Err(mpsc::RecvTimeoutError::Timeout) | Err(mpsc::RecvTimeoutError::Disconnected) => {
                                agent.tick_wait();
                                if agent.terminal() {
                                    return Ok(agent);
                                }
                            }
                        },
                    }
                }
            }));
        }
        drop(txs);
        for (j, h) in handles.into_iter().enumerate() {
            joined[j] = Some(h.join().expect("monitor thread panicked"));
        }
    });
    let agents = joined.into_iter().map(|r| r.unwrap()).collect::<Result<Vec<_>, _>>()?;
    let elapsed = start.elapsed().map(|d| d.as_secs()).unwrap_or(0);
    Ok(collect(agents, elapsed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StopReason;
    use crate::topo::{generate, GeneratorParams};

    fn addr(s: &str) -> Addr {
        s.parse().unwrap()
    }

    fn uniform_setups(m: usize) -> Vec<MonitorSetup> {
        vec![MonitorSetup::default(); m]
    }

    /// Two monitors, four destinations, all routes length 2 through a
    /// shared router.
    fn flat_topo() -> Arc<SimTopology> {
        let mut text = String::new();
        for mon in ["1.0.0.1", "1.0.0.2"] {
            for d in ["9.0.0.1", "9.0.0.2", "9.0.0.3", "9.0.0.4"] {
                text.push_str(&format!("{mon} {d} 5.0.0.1 {d}\n"));
            }
        }
        Arc::new(SimTopology::parse(&text).unwrap())
    }

    fn flat_run_cfg() -> RunConfig {
        RunConfig { step_size: 2, ..Default::default() }
    }

    #[test]
    fn plan_matches_worked_examples() {
        let plan = plan_windows(200, 10, 10).unwrap();
        assert_eq!((plan.w, plan.slices), (20, 2));

        let plan = plan_windows(4, 2, 2).unwrap();
        assert_eq!(plan.w, 2);
        // Monitor 0 visits [0,2) then [2,4); monitor 1 the reverse.
        assert_eq!(plan.chunk_range(plan.chunk_for(0, 0)), 0..2);
        assert_eq!(plan.chunk_range(plan.chunk_for(0, 1)), 2..4);
        assert_eq!(plan.chunk_range(plan.chunk_for(1, 0)), 2..4);
        assert_eq!(plan.chunk_range(plan.chunk_for(1, 1)), 0..2);
    }

    #[test]
    fn plan_handles_remainders_with_short_and_empty_chunks() {
        let plan = plan_windows(5, 4, 2).unwrap();
        assert_eq!(plan.w, 2);
        assert_eq!(plan.chunk_range(2), 4..5);
        assert!(plan.chunk_range(3).is_empty());
        // Padded final slice: step 3 over w=5 gives slices of 3 and 2.
        let plan = plan_windows(5, 1, 3).unwrap();
        assert_eq!(plan.slices, 2);
        assert_eq!(plan.slice_range(0, 0), 0..3);
        assert_eq!(plan.slice_range(0, 1), 3..5);
    }

    #[test]
    fn plan_rejects_bad_geometry() {
        assert!(matches!(plan_windows(3, 4, 1), Err(CoordError::FewerDestinationsThanMonitors { .. })));
        assert!(matches!(plan_windows(0, 1, 1), Err(CoordError::NoDestinations)));
        assert!(matches!(plan_windows(4, 0, 1), Err(CoordError::NoMonitors)));
        assert!(matches!(plan_windows(4, 2, 0), Err(CoordError::BadStepSize { .. })));
        assert!(matches!(plan_windows(4, 2, 3), Err(CoordError::BadStepSize { .. })));
        assert!(matches!(plan_windows(300, 1, 1), Err(CoordError::TooManySlices(300))));
        assert!(matches!(plan_windows(300, 290, 1), Err(CoordError::RingTooLarge(290))));
    }

    #[test]
    fn mixed_stop_sets_rejected_at_startup() {
        let topo = flat_topo();
        let monitors = [addr("1.0.0.1"), addr("1.0.0.2")];
        let dests = topo.destinations();
        let mut setups = uniform_setups(2);
        setups[1].stop_set = StopSetImpl::Bloom { m_bits: 1000, k: 5 };
        let err = run_sequential(&topo, &monitors, &dests, &setups, &flat_run_cfg()).unwrap_err();
        assert_eq!(err, CoordError::MixedStopSets);

        let mut setups = uniform_setups(2);
        setups[1].prefix_len = 24;
        let err = run_sequential(&topo, &monitors, &dests, &setups, &flat_run_cfg()).unwrap_err();
        assert_eq!(err, CoordError::MixedStopSets);

        let err = run_sequential(&topo, &monitors, &dests, &uniform_setups(3), &flat_run_cfg()).unwrap_err();
        assert_eq!(err, CoordError::SetupCountMismatch { setups: 3, monitors: 2 });
    }

    #[test]
    fn single_monitor_never_waits_and_covers_everything() {
        let topo = flat_topo();
        let monitors = [addr("1.0.0.1")];
        let dests = topo.destinations();
        let out = run_sequential(&topo, &monitors, &dests, &uniform_setups(1), &flat_run_cfg()).unwrap();
        assert_eq!(out.statuses, vec![AgentStatus::Done]);
        assert_eq!(out.records[0].len(), 4);
        assert_eq!(out.stats[0].wait_periods, 0);
        // One window of four destinations in slices of two: two updates,
        // addressed to itself.
        assert_eq!(out.messages[0].len(), 2);
        assert_eq!(out.elapsed, 0);
    }

    #[test]
    fn ring_gates_pass_and_both_monitors_finish() {
        let topo = flat_topo();
        let monitors = [addr("1.0.0.1"), addr("1.0.0.2")];
        let dests = topo.destinations();
        let out = run_sequential(&topo, &monitors, &dests, &uniform_setups(2), &flat_run_cfg()).unwrap();
        assert_eq!(out.statuses, vec![AgentStatus::Done, AgentStatus::Done]);
        for j in 0..2 {
            assert_eq!(out.records[j].len(), 4);
            // Two windows, one slice each (w=2, step=2).
            assert_eq!(out.messages[j].len(), 2);
            assert_eq!(out.stats[j].window_h.len(), 2);
        }
        assert_eq!(out.elapsed, 0);
    }

    #[test]
    fn merge_always_precedes_the_dependent_probe() {
        let params = GeneratorParams { routers: 20, monitors: 3, destinations: 12, extra_links: 4, ..Default::default() };
        let topo = Arc::new(generate(&params, 42).unwrap());
        let monitors = topo.monitors();
        let dests = topo.destinations();
        let cfg = RunConfig { step_size: 2, ..Default::default() };
        let out = run_sequential(&topo, &monitors, &dests, &uniform_setups(3), &cfg).unwrap();
        assert!(out.statuses.iter().all(|s| *s == AgentStatus::Done));
        let plan = plan_windows(dests.len(), monitors.len(), cfg.step_size).unwrap();
        for (j, stats) in out.stats.iter().enumerate() {
            let own_chunk = plan.chunk_for(j, 0) as u8;
            let mut merged = HashSet::new();
            for ev in &stats.events {
                match *ev {
                    AgentEvent::MergedUpdate { chunk, slice } => {
                        merged.insert((chunk, slice));
                    }
                    AgentEvent::ProbedSlice { chunk, slice } => {
                        if chunk != own_chunk {
                            assert!(
                                merged.contains(&(chunk, slice)),
                                "monitor {j} probed chunk {chunk} slice {slice} before merging its update"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn geometry_example_sends_twenty_messages_per_monitor() {
        let params =
            GeneratorParams { routers: 60, monitors: 10, destinations: 200, extra_links: 15, ..Default::default() };
        let topo = Arc::new(generate(&params, 7).unwrap());
        let monitors = topo.monitors();
        let dests = topo.destinations();
        assert_eq!((monitors.len(), dests.len()), (10, 200));
        let cfg = RunConfig { step_size: 10, ..Default::default() };
        let out = run_sequential(&topo, &monitors, &dests, &uniform_setups(10), &cfg).unwrap();
        assert!(out.statuses.iter().all(|s| *s == AgentStatus::Done));
        let mut total = 0;
        for j in 0..10 {
            assert_eq!(out.messages[j].len(), 20, "monitor {j}");
            assert_eq!(out.records[j].len(), 200);
            total += out.messages[j].len();
        }
        // m monitors x m windows x 2 slices.
        assert_eq!(total, 200);
    }

    #[test]
    fn silent_predecessor_fails_its_successor_after_forty_periods() {
        let topo = flat_topo();
        let monitors = [addr("1.0.0.1"), addr("1.0.0.2")];
        let dests = topo.destinations();
        let mut setups = uniform_setups(2);
        setups[0].silent = true;
        let out = run_sequential(&topo, &monitors, &dests, &setups, &flat_run_cfg()).unwrap();
        // The silent monitor still hears from its own predecessor (the
        // victim sent its first-window updates before starving), so it
        // finishes; the victim gives up.
        assert_eq!(out.statuses, vec![AgentStatus::Done, AgentStatus::Failed]);
        assert_eq!(out.elapsed, 40 * 30);
        assert_eq!(out.stats[1].wait_periods, 40);
        assert_eq!(out.messages[0].len(), 0);
        // Partial results drained: the victim probed its first window (two
        // destinations) and nothing after entering Waiting.
        assert_eq!(out.records[1].len(), 2);
        // Zero probes while waiting. The victim sent: 2 estimation probes
        // and 2x2 trace probes for window 0 (h=1, route length 2, no
        // backwards phase), then 2 estimation probes for window 1 before
        // hitting the gate. Nothing more.
        assert_eq!(out.stats[1].estimation_probes, 4);
        assert_eq!(out.stats[1].trace_probes, 4);
    }

    #[test]
    fn sequential_runs_are_deterministic() {
        let params = GeneratorParams { routers: 25, monitors: 4, destinations: 24, extra_links: 6, ..Default::default() };
        let topo = Arc::new(generate(&params, 99).unwrap());
        let monitors = topo.monitors();
        let dests = topo.destinations();
        let cfg = RunConfig { step_size: 3, compress: true, ..Default::default() };
        let a = run_sequential(&topo, &monitors, &dests, &uniform_setups(4), &cfg).unwrap();
        let b = run_sequential(&topo, &monitors, &dests, &uniform_setups(4), &cfg).unwrap();
        assert_eq!(a.statuses, b.statuses);
        assert_eq!(a.records, b.records);
        assert_eq!(a.messages, b.messages);
        assert_eq!(a.elapsed, b.elapsed);
    }

    #[test]
    fn threaded_scheduler_matches_sequential_content() {
        let params = GeneratorParams { routers: 20, monitors: 3, destinations: 12, extra_links: 5, ..Default::default() };
        let topo = Arc::new(generate(&params, 5).unwrap());
        let monitors = topo.monitors();
        let dests = topo.destinations();
        let cfg = RunConfig { step_size: 2, ..Default::default() };
        let seq = run_sequential(&topo, &monitors, &dests, &uniform_setups(3), &cfg).unwrap();
        let thr = run_threaded(&topo, &monitors, &dests, &uniform_setups(3), &cfg, TimeSource::Frozen).unwrap();
        assert_eq!(seq.statuses, thr.statuses);
        assert_eq!(seq.records, thr.records);
        assert_eq!(seq.messages, thr.messages);
    }

    #[test]
    fn bloom_mode_shares_stops_through_filters() {
        let params = GeneratorParams { routers: 30, monitors: 2, destinations: 16, extra_links: 4, ..Default::default() };
        let topo = Arc::new(generate(&params, 11).unwrap());
        let monitors = topo.monitors();
        let dests = topo.destinations();
        let setups = vec![
            MonitorSetup {
                stop_set: StopSetImpl::Bloom { m_bits: 100_000, k: 5 },
                prefix_len: 32,
                silent: false
            };
            2
        ];
        let cfg = RunConfig { step_size: 4, compress: true, ..Default::default() };
        let out = run_sequential(&topo, &monitors, &dests, &setups, &cfg).unwrap();
        assert!(out.statuses.iter().all(|s| *s == AgentStatus::Done));
        let stopset_stops = out
            .records
            .iter()
            .flatten()
            .filter(|r| r.forward_reason == StopReason::StopSet || r.backward_reason == StopReason::StopSet)
            .count();
        assert!(stopset_stops > 0, "shared filters never stopped anything");
    }
}
