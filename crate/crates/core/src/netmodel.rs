//! Physical network model and the cache-replacement CMDP environment.
//!
//! Each base station owns a fixed array of equal-size cache slots. Requests
//! arrive from clients that are covered by one or two base stations. A
//! request is a hit when any covering base station already holds the
//! content; otherwise it is routed to the least-loaded covering station and
//! counted as a miss. Misses that find the serving cache full are the
//! decision points handed to a replacement policy.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{ContentId, RequestEvent, RequestStream, StreamState};

pub const SNAPSHOT_VERSION: u32 = 1;

/// How clients map onto covering base stations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum CoverageLayout {
    /// Client `j` is homed at BS `j / clients_per_bs`; the last `overlap`
    /// clients of every BS are also covered by the next BS on the ring.
    Ring { overlap: usize },
    /// Every client homed away from `hub` is also covered by `hub`.
    Hub { hub: usize },
    /// One covering set per client.
    Explicit { sets: Vec<Vec<usize>> },
}

impl Default for CoverageLayout {
    fn default() -> Self {
        CoverageLayout::Ring { overlap: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_bs: usize,
    pub cap: usize,
    pub clients_per_bs: usize,
    pub coverage: CoverageLayout,
    /// Metres; empty means BSs spaced 200 m apart on a line.
    pub bs_positions: Vec<[f64; 2]>,
    /// Mbps; empty means 100 for every BS.
    pub backhaul_capacity: Vec<f64>,
    /// Number of recent requests the load tracker averages over.
    pub load_window: usize,
    /// Number of recent requests the popularity counter averages over.
    pub popularity_window: usize,
    /// Reward scale applied to the hit delta.
    pub reward_scale: f64,
    /// Exponent of the penalty `1 / (r^k + 1)`.
    pub penalty_exponent: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_bs: 5,
            cap: 150,
            clients_per_bs: 8,
            coverage: CoverageLayout::default(),
            bs_positions: Vec::new(),
            backhaul_capacity: Vec::new(),
            load_window: 1000,
            popularity_window: 2000,
            reward_scale: 1.0,
            penalty_exponent: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn n_clients(&self) -> usize {
        match &self.coverage {
            CoverageLayout::Explicit { sets } => sets.len(),
            _ => self.n_bs * self.clients_per_bs,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_bs * self.cap + 1
    }

    /// Covering BS indices per client, sorted and de-duplicated.
    pub fn coverage_sets(&self) -> Result<Vec<Vec<usize>>> {
        let n = self.n_bs;
        let mut sets: Vec<Vec<usize>> = match &self.coverage {
            CoverageLayout::Ring { overlap } => {
                if *overlap > self.clients_per_bs {
                    return Err(Error::config(
                        "network.coverage.overlap",
                        "overlap exceeds clients_per_bs",
                    ));
                }
                (0..self.n_clients())
                    .map(|j| {
                        let home = j / self.clients_per_bs;
                        let local = j % self.clients_per_bs;
                        let mut s = vec![home];
                        if n > 1 && local >= self.clients_per_bs - overlap {
                            s.push((home + 1) % n);
                        }
                        s
                    })
                    .collect()
            }
            CoverageLayout::Hub { hub } => {
                if *hub >= n {
                    return Err(Error::config("network.coverage.hub", "hub index out of range"));
                }
                (0..self.n_clients())
                    .map(|j| {
                        let home = j / self.clients_per_bs;
                        if home == *hub {
                            vec![home]
                        } else {
                            vec![home, *hub]
                        }
                    })
                    .collect()
            }
            CoverageLayout::Explicit { sets } => sets.clone(),
        };
        for (j, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if s.is_empty() {
                return Err(Error::config(
                    format!("network.coverage.sets[{j}]"),
                    "client is not covered by any BS",
                ));
            }
            if let Some(&bad) = s.iter().find(|&&b| b >= n) {
                return Err(Error::config(
                    format!("network.coverage.sets[{j}]"),
                    format!("BS index {bad} out of range"),
                ));
            }
        }
        Ok(sets)
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        if self.bs_positions.is_empty() {
            (0..self.n_bs).map(|i| [200.0 * i as f64, 0.0]).collect()
        } else {
            self.bs_positions.clone()
        }
    }

    pub fn backhaul(&self) -> Vec<f64> {
        if self.backhaul_capacity.is_empty() {
            vec![100.0; self.n_bs]
        } else {
            self.backhaul_capacity.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bs == 0 {
            return Err(Error::config("network.n_bs", "must be >= 1"));
        }
        if self.cap == 0 {
            return Err(Error::config("network.cap", "must be >= 1"));
        }
        if self.load_window == 0 {
            return Err(Error::config("network.load_window", "must be >= 1"));
        }
        if self.popularity_window == 0 {
            return Err(Error::config("network.popularity_window", "must be >= 1"));
        }
        if !self.bs_positions.is_empty() && self.bs_positions.len() != self.n_bs {
            return Err(Error::config("network.bs_positions", "need one position per BS"));
        }
        if !self.backhaul_capacity.is_empty() && self.backhaul_capacity.len() != self.n_bs {
            return Err(Error::config(
                "network.backhaul_capacity",
                "need one capacity per BS",
            ));
        }
        if !(self.reward_scale >= 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::config("network.reward_scale", "must be finite and >= 0"));
        }
        if !(self.penalty_exponent > 0.0 && self.penalty_exponent.is_finite()) {
            return Err(Error::config("network.penalty_exponent", "must be finite and > 0"));
        }
        self.coverage_sets().map(|_| ())
    }
}

/// An occupied cache slot: content, last-cached time `t_n`, frequency `f_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub content: ContentId,
    pub cached_at: u64,
    pub freq: u64,
}

/// Fixed-capacity cache of one BS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheUnit {
    slots: Vec<Option<Slot>>,
}

impl CacheUnit {
    pub fn new(cap: usize) -> Self {
        CacheUnit {
            slots: vec![None; cap],
        }
    }

    pub fn cap(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Option<Slot>] {
        &self.slots
    }

    pub fn position(&self, d: ContentId) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| s.is_some_and(|s| s.content == d))
    }

    pub fn contains(&self, d: ContentId) -> bool {
        self.position(d).is_some()
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.slots.iter().position(Option::is_none)
    }

    pub fn is_full(&self) -> bool {
        self.first_empty().is_none()
    }

    pub fn occupied(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Records an access: on a hit bumps `f_n` and refreshes `t_n`; a miss
    /// leaves the unit untouched.
    pub fn lookup(&mut self, d: ContentId, t: u64) -> bool {
        match self.position(d) {
            Some(i) => {
                let slot = self.slots[i].as_mut().expect("position points at a slot");
                slot.freq += 1;
                slot.cached_at = t;
                true
            }
            None => false,
        }
    }

    /// Overwrites slot `i` with fresh content. Returns the evicted entry.
    ///
    /// Refuses to create a duplicate of content held in another slot.
    pub fn place(&mut self, i: usize, d: ContentId, t: u64) -> Result<Option<Slot>> {
        if i >= self.slots.len() {
            return Err(Error::domain(format!("slot {i} out of range")));
        }
        if let Some(j) = self.position(d) {
            if j != i {
                return Err(Error::Contract(format!(
                    "content {} already cached in slot {j}",
                    d.0
                )));
            }
        }
        Ok(std::mem::replace(
            &mut self.slots[i],
            Some(Slot {
                content: d,
                cached_at: t,
                freq: 1,
            }),
        ))
    }

    /// Occupied slot minimizing `key`, ties to the lowest index.
    pub fn argmin_by_key<K: PartialOrd>(&self, key: impl Fn(&Slot) -> K) -> Option<usize> {
        let mut best: Option<(usize, K)> = None;
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(s) = s {
                let k = key(s);
                if best.as_ref().is_none_or(|(_, b)| k < *b) {
                    best = Some((i, k));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    /// Least recently used occupied slot.
    pub fn lru_slot(&self) -> Option<usize> {
        self.argmin_by_key(|s| s.cached_at)
    }
}

/// A cache decision: 0 skips, `v >= 1` addresses slot `(v-1) % cap` of BS
/// `(v-1) / cap`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub usize);

impl Action {
    pub const SKIP: Action = Action(0);

    pub fn slot(bs: usize, slot: usize, cap: usize) -> Action {
        Action(bs * cap + slot + 1)
    }

    pub fn is_skip(self) -> bool {
        self.0 == 0
    }

    /// `(bs, slot)` addressed by this action, or `None` for skip.
    pub fn target(self, cap: usize) -> Option<(usize, usize)> {
        (self.0 > 0).then(|| ((self.0 - 1) / cap, (self.0 - 1) % cap))
    }
}

/// Load-aware extension of the observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateExtension {
    pub client: usize,
    pub loads: Vec<f64>,
}

/// Observation tuple `(n, t_n, f_n)` with its optional extension.
///
/// `t_n`/`f_n` describe the requested content on the serving BS when it is
/// cached there. Otherwise `last_cached` is `None` and `frequency` is the
/// content's request count over the recent popularity window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmdpState {
    pub bs: usize,
    pub last_cached: Option<u64>,
    pub frequency: u64,
    pub time: u64,
    pub extension: Option<StateExtension>,
}

/// Sliding window over the serving BS of recent requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadTracker {
    window: VecDeque<usize>,
    counts: Vec<u64>,
    capacity: usize,
}

impl LoadTracker {
    pub fn new(n_bs: usize, capacity: usize) -> Self {
        LoadTracker {
            window: VecDeque::with_capacity(capacity),
            counts: vec![0; n_bs],
            capacity: capacity.max(1),
        }
    }

    pub fn record(&mut self, bs: usize) {
        if self.window.len() == self.capacity {
            if let Some(old) = self.window.pop_front() {
                self.counts[old] -= 1;
            }
        }
        self.window.push_back(bs);
        self.counts[bs] += 1;
    }

    pub fn occupancy(&self) -> usize {
        self.window.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Share of windowed requests served by BS `n`; 0 for an empty window.
    pub fn normalized_load(&self, n: usize) -> Result<f64> {
        let c = *self
            .counts
            .get(n)
            .ok_or_else(|| Error::domain(format!("BS index {n} out of range")))?;
        if self.window.is_empty() {
            return Ok(0.0);
        }
        Ok(c as f64 / self.window.len() as f64)
    }

    pub fn loads(&self) -> Vec<f64> {
        let occ = self.window.len();
        if occ == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / occ as f64).collect()
    }
}

/// Sliding request counts per content id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityWindow {
    window: VecDeque<ContentId>,
    counts: Vec<u32>,
    capacity: usize,
}

impl PopularityWindow {
    pub fn new(catalogue: usize, capacity: usize) -> Self {
        PopularityWindow {
            window: VecDeque::with_capacity(capacity),
            counts: vec![0; catalogue],
            capacity: capacity.max(1),
        }
    }

    pub fn record(&mut self, d: ContentId) {
        if d.index() >= self.counts.len() {
            self.counts.resize(d.index() + 1, 0);
        }
        if self.window.len() == self.capacity {
            if let Some(old) = self.window.pop_front() {
                self.counts[old.index()] -= 1;
            }
        }
        self.window.push_back(d);
        self.counts[d.index()] += 1;
    }

    pub fn count(&self, d: ContentId) -> u64 {
        self.counts.get(d.index()).copied().unwrap_or(0) as u64
    }
}

/// Running hit/request counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCounter {
    pub requests: u64,
    pub hits: u64,
}

impl HitCounter {
    /// `hits / requests`, or `None` before the first request.
    pub fn hit_rate(&self) -> Option<f64> {
        (self.requests > 0).then(|| self.hits as f64 / self.requests as f64)
    }
}

/// Outcome of applying a decision to the caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionEffect {
    Skipped,
    AutoFilled { bs: usize, slot: usize },
    Replaced { bs: usize, slot: usize, evicted: Option<ContentId> },
    /// Target BS does not cover the client; treated as a skip.
    Rejected,
}

impl ActionEffect {
    pub fn accepted(self) -> bool {
        matches!(self, ActionEffect::AutoFilled { .. } | ActionEffect::Replaced { .. })
    }
}

/// Where a request was served and whether it hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Served {
    pub bs: usize,
    pub hit: bool,
}

/// Caches, trackers and counters of the whole network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: NetworkConfig,
    coverage: Vec<Vec<usize>>,
    units: Vec<CacheUnit>,
    tracker: LoadTracker,
    popularity: PopularityWindow,
    counter: HitCounter,
    served_per_bs: Vec<u64>,
    policy_errors: u64,
}

impl Network {
    pub fn new(config: NetworkConfig, catalogue: usize) -> Result<Self> {
        config.validate()?;
        let coverage = config.coverage_sets()?;
        Ok(Network {
            units: (0..config.n_bs).map(|_| CacheUnit::new(config.cap)).collect(),
            tracker: LoadTracker::new(config.n_bs, config.load_window),
            popularity: PopularityWindow::new(catalogue, config.popularity_window),
            counter: HitCounter::default(),
            served_per_bs: vec![0; config.n_bs],
            policy_errors: 0,
            coverage,
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn n_bs(&self) -> usize {
        self.config.n_bs
    }

    pub fn cap(&self) -> usize {
        self.config.cap
    }

    pub fn units(&self) -> &[CacheUnit] {
        &self.units
    }

    pub fn unit(&self, bs: usize) -> &CacheUnit {
        &self.units[bs]
    }

    pub fn unit_mut(&mut self, bs: usize) -> &mut CacheUnit {
        &mut self.units[bs]
    }

    pub fn tracker(&self) -> &LoadTracker {
        &self.tracker
    }

    pub fn popularity(&self) -> &PopularityWindow {
        &self.popularity
    }

    pub fn counter(&self) -> HitCounter {
        self.counter
    }

    pub fn served_per_bs(&self) -> &[u64] {
        &self.served_per_bs
    }

    pub fn policy_errors(&self) -> u64 {
        self.policy_errors
    }

    pub fn loads(&self) -> Vec<f64> {
        self.tracker.loads()
    }

    pub fn coverage(&self, client: usize) -> Result<&[usize]> {
        self.coverage
            .get(client)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config("network.coverage", format!("client {client} is not covered")))
    }

    pub fn covers(&self, client: usize, bs: usize) -> bool {
        self.coverage
            .get(client)
            .is_some_and(|s| s.binary_search(&bs).is_ok())
    }

    fn least_loaded(&self, candidates: impl IntoIterator<Item = usize>) -> Option<usize> {
        let mut best: Option<(usize, u64)> = None;
        for bs in candidates {
            let c = self.tracker.counts[bs];
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((bs, c));
            }
        }
        best.map(|(bs, _)| bs)
    }

    /// Least-loaded covering BS (ties to the lowest index); the request is
    /// recorded against it.
    pub fn route_request(&mut self, ev: &RequestEvent) -> Result<usize> {
        let bs = self
            .least_loaded(self.coverage(ev.client)?.iter().copied())
            .expect("coverage sets are non-empty");
        self.tracker.record(bs);
        Ok(bs)
    }

    /// Serves one request: a covering BS holding the content answers it (the
    /// least loaded one if several do), otherwise it is routed as a miss.
    pub fn serve(&mut self, ev: &RequestEvent) -> Result<Served> {
        self.popularity.record(ev.content);
        self.counter.requests += 1;
        let holders: Vec<usize> = self
            .coverage(ev.client)?
            .iter()
            .copied()
            .filter(|&bs| self.units[bs].contains(ev.content))
            .collect();
        let served = match self.least_loaded(holders) {
            Some(bs) => {
                self.tracker.record(bs);
                let hit = self.units[bs].lookup(ev.content, ev.time);
                debug_assert!(hit);
                self.counter.hits += 1;
                Served { bs, hit: true }
            }
            None => Served {
                bs: self.route_request(ev)?,
                hit: false,
            },
        };
        self.served_per_bs[served.bs] += 1;
        Ok(served)
    }

    /// Applies a decision for the missed request `ev` served at
    /// `serving_bs`. An empty slot on the serving BS is always filled first.
    pub fn apply_action(
        &mut self,
        a: Action,
        ev: &RequestEvent,
        serving_bs: usize,
    ) -> Result<ActionEffect> {
        if a.0 >= self.config.n_actions() {
            return Err(Error::domain(format!(
                "action {} outside [0, {}]",
                a.0,
                self.config.n_actions() - 1
            )));
        }
        if let Some(slot) = self.units[serving_bs].first_empty() {
            if self.units[serving_bs].contains(ev.content) {
                return Ok(ActionEffect::Skipped);
            }
            self.units[serving_bs].place(slot, ev.content, ev.time)?;
            return Ok(ActionEffect::AutoFilled {
                bs: serving_bs,
                slot,
            });
        }
        let Some((bs, slot)) = a.target(self.config.cap) else {
            return Ok(ActionEffect::Skipped);
        };
        if !self.covers(ev.client, bs) || self.units[bs].contains(ev.content) {
            self.policy_errors += 1;
            return Ok(ActionEffect::Rejected);
        }
        let evicted = self.units[bs].place(slot, ev.content, ev.time)?;
        Ok(ActionEffect::Replaced {
            bs,
            slot,
            evicted: evicted.map(|s| s.content),
        })
    }

    /// Base observation for a request served at `bs`.
    pub fn observe(&self, ev: &RequestEvent, bs: usize) -> CmdpState {
        let (last_cached, frequency) = match self.units[bs].position(ev.content) {
            Some(i) => {
                let s = self.units[bs].slots[i].expect("occupied");
                (Some(s.cached_at), s.freq)
            }
            None => (None, self.popularity.count(ev.content)),
        };
        CmdpState {
            bs,
            last_cached,
            frequency,
            time: ev.time,
            extension: None,
        }
    }
}

/// Penalty `w = 1 / (r^k + 1)`.
pub fn penalty(reward: f64, exponent: f64) -> f64 {
    1.0 / (reward.max(0.0).powf(exponent) + 1.0)
}

/// Reward `r = scale * hit_delta`.
pub fn reward(hit_delta: u64, scale: f64) -> f64 {
    scale * hit_delta as f64
}

/// Request source feeding an environment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "SourceState", try_from = "SourceState")]
pub enum EventSource {
    Synthetic(RequestStream),
    Replay { events: Vec<RequestEvent>, pos: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceState {
    Synthetic(StreamState),
    Replay { events: Vec<RequestEvent>, pos: usize },
}

impl From<EventSource> for SourceState {
    fn from(s: EventSource) -> Self {
        match s {
            EventSource::Synthetic(stream) => SourceState::Synthetic(stream.state()),
            EventSource::Replay { events, pos } => SourceState::Replay { events, pos },
        }
    }
}

impl TryFrom<SourceState> for EventSource {
    type Error = Error;

    fn try_from(s: SourceState) -> Result<Self> {
        Ok(match s {
            SourceState::Synthetic(st) => EventSource::Synthetic(RequestStream::from_state(st)?),
            SourceState::Replay { events, pos } => EventSource::Replay { events, pos },
        })
    }
}

impl Iterator for EventSource {
    type Item = RequestEvent;

    fn next(&mut self) -> Option<RequestEvent> {
        match self {
            EventSource::Synthetic(s) => s.next(),
            EventSource::Replay { events, pos } => {
                let ev = events.get(*pos).copied();
                *pos += ev.is_some() as usize;
                ev
            }
        }
    }
}

/// A pending decision: a missed request whose serving BS is full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub event: RequestEvent,
    pub serving_bs: usize,
    pub state: CmdpState,
    pub loads: Vec<f64>,
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub penalty: f64,
    /// Hits accumulated between this decision and the next one.
    pub hits: u64,
    pub effect: ActionEffect,
    pub next: Option<Observation>,
}

impl StepOutcome {
    pub fn hit(&self) -> bool {
        self.hits > 0
    }

    pub fn done(&self) -> bool {
        self.next.is_none()
    }
}

/// Cache-replacement environment over a request source.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CacheEnv {
    net: Network,
    source: EventSource,
    /// Maximum number of requests served; `None` runs until the source ends.
    budget: Option<u64>,
    pending: Option<Observation>,
    hits_at_last_decision: u64,
    decisions: u64,
    /// Served events not yet collected by [`CacheEnv::take_served`];
    /// `None` when not tracked.
    #[serde(default)]
    served: Option<Vec<RequestEvent>>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    env: CacheEnv,
}

impl CacheEnv {
    pub fn new(net: Network, source: EventSource, budget: Option<u64>) -> Self {
        CacheEnv {
            net,
            source,
            budget,
            pending: None,
            hits_at_last_decision: 0,
            decisions: 0,
            served: None,
        }
    }

    /// Starts collecting served events for [`CacheEnv::take_served`].
    pub fn track_served(&mut self) {
        self.served.get_or_insert_with(Vec::new);
    }

    /// Events served since the previous call (empty when not tracked).
    pub fn take_served(&mut self) -> Vec<RequestEvent> {
        self.served.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn pending(&self) -> Option<&Observation> {
        self.pending.as_ref()
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    pub fn exhausted(&self) -> bool {
        self.budget
            .is_some_and(|b| self.net.counter.requests >= b)
    }

    /// Serves requests until the next decision point. Hits and empty-slot
    /// fills are handled without consulting the policy. Returns `None` once
    /// the request budget or the source is exhausted.
    pub fn advance(&mut self) -> Result<Option<&Observation>> {
        if self.pending.is_some() {
            return Ok(self.pending.as_ref());
        }
        loop {
            if self.exhausted() {
                return Ok(None);
            }
            let Some(ev) = self.source.next() else {
                return Ok(None);
            };
            let served = self.net.serve(&ev)?;
            if let Some(log) = self.served.as_mut() {
                log.push(ev);
            }
            if served.hit {
                continue;
            }
            if !self.net.units[served.bs].is_full() {
                self.net.apply_action(Action::SKIP, &ev, served.bs)?;
                continue;
            }
            let state = self.net.observe(&ev, served.bs);
            self.pending = Some(Observation {
                event: ev,
                serving_bs: served.bs,
                state,
                loads: self.net.loads(),
            });
            return Ok(self.pending.as_ref());
        }
    }

    /// Applies `a` to the pending decision and runs to the next one. The
    /// reward counts the hits served in between.
    pub fn step(&mut self, a: Action) -> Result<StepOutcome> {
        let obs = self
            .pending
            .take()
            .ok_or_else(|| Error::Contract("step called without a pending decision".into()))?;
        let effect = self.net.apply_action(a, &obs.event, obs.serving_bs)?;
        self.decisions += 1;
        self.advance()?;
        let hits_now = self.net.counter.hits;
        let hits = hits_now - self.hits_at_last_decision;
        self.hits_at_last_decision = hits_now;
        let cfg = &self.net.config;
        let r = reward(hits, cfg.reward_scale);
        Ok(StepOutcome {
            reward: r,
            penalty: penalty(r, cfg.penalty_exponent),
            hits,
            effect,
            next: self.pending.clone(),
        })
    }

    /// Marks the current hit count as the reward baseline, e.g. right after
    /// the first decision point is reached.
    pub fn mark_reward_baseline(&mut self) {
        self.hits_at_last_decision = self.net.counter.hits;
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let snap = Snapshot {
            format_version: SNAPSHOT_VERSION,
            env: self.clone(),
        };
        let json = serde_json::to_string(&snap)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: Snapshot = serde_json::from_str(&text)?;
        if snap.format_version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "snapshot version {} unsupported (expected {SNAPSHOT_VERSION})",
                snap.format_version
            )));
        }
        Ok(snap.env)
    }
}
