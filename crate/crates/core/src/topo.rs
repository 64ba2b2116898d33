//! The simulated network: per-(monitor, destination) routes plus
//! per-interface responsiveness, and the TTL probe semantics over them.
//!
//! A route stores hops 1..=L where position L is the destination itself. A
//! probe with ttl < L expires at hop `ttl`; a probe with ttl >= L reaches
//! the destination, which answers with the TTL the probe had left. Every
//! reply is a pure function of (topology, monitor, dest, ttl), so runs are
//! reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::addr::Addr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopoError {
    #[error("no route for monitor {monitor} to destination {dest}")]
    UnknownRoute { monitor: Addr, dest: Addr },
    #[error("probe ttl must be >= 1")]
    ZeroTtl,
    #[error("route {monitor} -> {dest} must end at the destination (last hop {last})")]
    RouteEndMismatch { monitor: Addr, dest: Addr, last: Addr },
    #[error("route {monitor} -> {dest} is empty")]
    EmptyRoute { monitor: Addr, dest: Addr },
    #[error("duplicate route for {monitor} -> {dest}")]
    DuplicateRoute { monitor: Addr, dest: Addr },
    #[error("rtt range {min}..{max} us is inverted")]
    BadRttRange { min: u32, max: u32 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("generator: {0}")]
    Generator(String),
    #[error("io: {0}")]
    Io(String),
}

/// What a probe elicits. RTTs are synthetic, in milliseconds with
/// microsecond resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeReply {
    TimeExceeded { responder: Addr, rtt_ms: f64 },
    DestinationUnreachable { responder: Addr, remaining_ttl: u8, rtt_ms: f64 },
    Timeout,
}

impl ProbeReply {
    pub fn responder(&self) -> Option<Addr> {
        match *self {
            ProbeReply::TimeExceeded { responder, .. } | ProbeReply::DestinationUnreachable { responder, .. } => {
                Some(responder)
            }
            ProbeReply::Timeout => None,
        }
    }

    pub fn rtt_ms(&self) -> Option<f64> {
        match *self {
            ProbeReply::TimeExceeded { rtt_ms, .. } | ProbeReply::DestinationUnreachable { rtt_ms, .. } => Some(rtt_ms),
            ProbeReply::Timeout => None,
        }
    }
}

/// Immutable after construction; all monitor agents read it concurrently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTopology {
    routes: BTreeMap<(Addr, Addr), Vec<Addr>>,
    non_responders: BTreeSet<Addr>,
    seed: u64,
    rtt_range_us: (u32, u32),
}

pub const DEFAULT_RTT_RANGE_US: (u32, u32) = (1_000, 50_000);

impl SimTopology {
    pub fn new(
        routes: BTreeMap<(Addr, Addr), Vec<Addr>>,
        non_responders: BTreeSet<Addr>,
        seed: u64,
        rtt_range_us: (u32, u32),
    ) -> Result<Self, TopoError> {
        if rtt_range_us.0 > rtt_range_us.1 {
            return Err(TopoError::BadRttRange { min: rtt_range_us.0, max: rtt_range_us.1 });
        }
        for (&(monitor, dest), hops) in &routes {
            match hops.last() {
                None => return Err(TopoError::EmptyRoute { monitor, dest }),
                Some(&last) if last != dest => return Err(TopoError::RouteEndMismatch { monitor, dest, last }),
                _ => {}
            }
        }
        Ok(SimTopology { routes, non_responders, seed, rtt_range_us })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn route(&self, monitor: Addr, dest: Addr) -> Option<&[Addr]> {
        self.routes.get(&(monitor, dest)).map(Vec::as_slice)
    }

    pub fn responds(&self, a: Addr) -> bool {
        !self.non_responders.contains(&a)
    }

    /// Monitors that appear as route sources, sorted ascending.
    pub fn monitors(&self) -> Vec<Addr> {
        let set: BTreeSet<Addr> = self.routes.keys().map(|&(m, _)| m).collect();
        set.into_iter().collect()
    }

    /// Destinations that appear as route targets, sorted ascending.
    pub fn destinations(&self) -> Vec<Addr> {
        let set: BTreeSet<Addr> = self.routes.keys().map(|&(_, d)| d).collect();
        set.into_iter().collect()
    }

    /// Every address the topology mentions: monitors, hops, destinations.
    pub fn distinct_addresses(&self) -> BTreeSet<Addr> {
        let mut set = BTreeSet::new();
        for (&(m, d), hops) in &self.routes {
            set.insert(m);
            set.insert(d);
            set.extend(hops.iter().copied());
        }
        set
    }

    fn rtt_ms(&self, responder: Addr, monitor: Addr) -> f64 {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ u64::from(responder.0));
        h = splitmix64(h ^ (u64::from(monitor.0) << 32 | 0x5157));
        let (min, max) = self.rtt_range_us;
        let span = u64::from(max - min) + 1;
        let us = u64::from(min) + h % span;
        us as f64 / 1000.0
    }

    /// One probe. ttl < L expires mid-path; ttl >= L reaches the
    /// destination, whose reply reports the probe's remaining TTL
    /// (ttl - L + 1). Non-responding interfaces swallow the probe.
    pub fn probe(&self, monitor: Addr, dest: Addr, ttl: u8) -> Result<ProbeReply, TopoError> {
        if ttl == 0 {
            return Err(TopoError::ZeroTtl);
        }
        let hops = self.routes.get(&(monitor, dest)).ok_or(TopoError::UnknownRoute { monitor, dest })?;
        let l = hops.len();
        if (ttl as usize) < l {
            let responder = hops[ttl as usize - 1];
            if self.responds(responder) {
                Ok(ProbeReply::TimeExceeded { responder, rtt_ms: self.rtt_ms(responder, monitor) })
            } else {
                Ok(ProbeReply::Timeout)
            }
        } else if self.responds(dest) {
            Ok(ProbeReply::DestinationUnreachable {
                responder: dest,
                remaining_ttl: ttl - l as u8 + 1,
                rtt_ms: self.rtt_ms(dest, monitor),
            })
        } else {
            Ok(ProbeReply::Timeout)
        }
    }

    /// Line-oriented text form: `seed` and `rttrange` directives, one
    /// `nonresponder` line per silent interface, then one route per line as
    /// `monitor dest hop1 .. hopL`. Maps iterate sorted, so equal topologies
    /// render byte-identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "rttrange {} {}", self.rtt_range_us.0, self.rtt_range_us.1);
        for a in &self.non_responders {
            let _ = writeln!(out, "nonresponder {a}");
        }
        for (&(m, d), hops) in &self.routes {
            let _ = write!(out, "{m} {d}");
            for h in hops {
                let _ = write!(out, " {h}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TopoError> {
        let mut routes = BTreeMap::new();
        let mut non_responders = BTreeSet::new();
        let mut seed = 0u64;
        let mut rtt_range_us = DEFAULT_RTT_RANGE_US;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let bad = |msg: String| TopoError::Parse { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut tokens = content.split_whitespace();
            let first = tokens.next().unwrap();
            match first {
                "seed" => {
                    let v = tokens.next().ok_or_else(|| bad("seed needs a value".into()))?;
                    seed = v.parse().map_err(|_| bad(format!("bad seed {v:?}")))?;
                }
                "rttrange" => {
                    let lo = tokens.next().ok_or_else(|| bad("rttrange needs 2 values".into()))?;
                    let hi = tokens.next().ok_or_else(|| bad("rttrange needs 2 values".into()))?;
                    let lo = lo.parse().map_err(|_| bad(format!("bad rttrange value {lo:?}")))?;
                    let hi = hi.parse().map_err(|_| bad(format!("bad rttrange value {hi:?}")))?;
                    rtt_range_us = (lo, hi);
                }
                "nonresponder" => {
                    let v = tokens.next().ok_or_else(|| bad("nonresponder needs an address".into()))?;
                    let a: Addr = v.parse().map_err(|_| bad(format!("bad address {v:?}")))?;
                    non_responders.insert(a);
                }
                _ => {
                    let parse_addr =
                        |t: &str| t.parse::<Addr>().map_err(|_| bad(format!("bad address {t:?}")));
                    let monitor = parse_addr(first)?;
                    let dest = parse_addr(tokens.next().ok_or_else(|| bad("route needs a destination".into()))?)?;
                    let hops: Vec<Addr> = tokens.by_ref().map(parse_addr).collect::<Result<_, _>>()?;
                    if hops.is_empty() {
                        return Err(bad(format!("route {monitor} -> {dest} has no hops")));
                    }
                    if routes.insert((monitor, dest), hops).is_some() {
                        return Err(bad(format!("duplicate route {monitor} -> {dest}")));
                    }
                }
            }
            // Trailing junk after a directive is a typo worth rejecting.
            if matches!(first, "seed" | "nonresponder") && tokens.next().is_some() {
                return Err(TopoError::Parse { line, msg: format!("trailing tokens after {first}") });
            }
        }
        SimTopology::new(routes, non_responders, seed, rtt_range_us)
    }

    pub fn load(path: &Path) -> Result<Self, TopoError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopoError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TopoError> {
        std::fs::write(path, self.render()).map_err(|e| TopoError::Io(format!("{}: {e}", path.display())))
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Knobs for the random topology generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Interior routers; the connected core everything attaches to.
    pub routers: u32,
    pub monitors: u32,
    pub destinations: u32,
    /// Extra interior edges beyond the spanning tree; adds path diversity.
    pub extra_links: u32,
    /// Fraction of interior routers that never answer probes. Monitors and
    /// destinations always answer, so path-length estimation stays usable;
    /// hand-written topologies can mark anything silent.
    pub non_responder_fraction: f64,
    pub rtt_range_us: (u32, u32),
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            routers: 40,
            monitors: 5,
            destinations: 50,
            extra_links: 8,
            non_responder_fraction: 0.0,
            rtt_range_us: DEFAULT_RTT_RANGE_US,
        }
    }
}

/// Generates a deterministic random topology: a spanning tree over the
/// interior routers plus `extra_links` shortcut edges, with monitors and
/// destinations attached as degree-1 leaves. Routes are breadth-first
/// shortest paths with a fixed tie-break, so the routes out of one monitor
/// form a tree (shared prefixes) and all routes into one destination share
/// its final link (shared suffix).
pub fn generate(params: &GeneratorParams, seed: u64) -> Result<SimTopology, TopoError> {
    if params.routers == 0 || params.monitors == 0 || params.destinations == 0 {
        return Err(TopoError::Generator(
            "routers, monitors and destinations must all be >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&params.non_responder_fraction) {
        return Err(TopoError::Generator("non_responder_fraction must be in [0, 1]".into()));
    }
    if params.rtt_range_us.0 > params.rtt_range_us.1 {
        return Err(TopoError::BadRttRange { min: params.rtt_range_us.0, max: params.rtt_range_us.1 });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let r = params.routers as usize;

    // Random recursive tree over the interior, then shortcuts.
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); r];
    for i in 1..r {
        let parent = rng.random_range(0..i);
        adj[i].insert(parent);
        adj[parent].insert(i);
    }
    if r > 1 {
        for _ in 0..params.extra_links {
            let a = rng.random_range(0..r);
            let b = rng.random_range(0..r);
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
    }

    let total = r + params.monitors as usize + params.destinations as usize;
    let mut seen = BTreeSet::new();
    let mut addrs = Vec::with_capacity(total);
    while addrs.len() < total {
        let a = Addr(rng.random());
        if !a.is_invalid() && seen.insert(a) {
            addrs.push(a);
        }
    }
    let router_addr = &addrs[..r];
    let monitor_addr = &addrs[r..r + params.monitors as usize];
    let dest_addr = &addrs[r + params.monitors as usize..];

    let monitor_attach: Vec<usize> = (0..params.monitors).map(|_| rng.random_range(0..r)).collect();
    let dest_attach: Vec<usize> = (0..params.destinations).map(|_| rng.random_range(0..r)).collect();

    let mut non_responders = BTreeSet::new();
    if params.non_responder_fraction > 0.0 {
        // Exact count, deterministic choice of which routers are silent.
        let silent = ((r as f64) * params.non_responder_fraction).round() as usize;
        let mut order: Vec<usize> = (0..r).collect();
        order.shuffle(&mut rng);
        for &i in order.iter().take(silent.min(r)) {
            non_responders.insert(router_addr[i]);
        }
    }

    let mut routes = BTreeMap::new();
    for (mi, &start) in monitor_attach.iter().enumerate() {
        // BFS with index-ordered adjacency: one shortest-path tree per monitor.
        let mut parent: Vec<Option<usize>> = vec![None; r];
        parent[start] = Some(start);
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if parent[v].is_none() {
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        for (di, &dr) in dest_attach.iter().enumerate() {
            let mut interior = vec![dr];
            let mut cur = dr;
            while cur != start {
                cur = parent[cur].ok_or_else(|| TopoError::Generator("interior graph not connected".into()))?;
                interior.push(cur);
            }
            interior.reverse();
            let mut hops: Vec<Addr> = interior.into_iter().map(|i| router_addr[i]).collect();
            hops.push(dest_addr[di]);
            routes.insert((monitor_addr[mi], dest_addr[di]), hops);
        }
    }

    SimTopology::new(routes, non_responders, seed, params.rtt_range_us)
}
