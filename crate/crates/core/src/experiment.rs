//! Experiment configuration and orchestration: twin bootstrap, twin-driven
//! pre-training, the main run with periodic twin maintenance, metrics
//! emission and policy comparison.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, StateEncoder, Transition};
use crate::baselines::{decide_with, FrequencyMode, PolicyKind};
use crate::error::{Error, Result};
use crate::netmodel::{CacheEnv, EventSource, Network, NetworkConfig, Observation};
use crate::reliability::{
    extend_state, intervene_action, shape_reward, InterventionLog, ReliabilityConfig,
};
use crate::twin::{
    affinity_matrix, dcs_cluster, forecast_requests, h_twinning, train_local_twin, v_twinning,
    AffinityConfig, AffinityGraph, BsDescriptor, ClusterAssignment, TwinModel, TwinSyncConfig,
};
use crate::workload::{empirical_distribution, load_trace, RequestEvent, RequestStream, TraceOptions, Workload, WorkloadModel};

/// Annotated defaults shipped with the crate.
pub const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    #[serde(flatten)]
    pub model: WorkloadModel,
    /// Replay a `timestamp,key,op,size` trace instead of sampling.
    pub trace: Option<PathBuf>,
    /// Distinct keys kept from a trace; defaults to ten times the total
    /// cache capacity.
    pub trace_catalogue_cap: Option<usize>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            model: WorkloadModel::default(),
            trace: None,
            trace_catalogue_cap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Frequency source of LFU/MFU.
    pub frequency: FrequencyMode,
    pub agent: AgentConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::DRec,
            frequency: FrequencyMode::InCache,
            agent: AgentConfig::default(),
        }
    }
}

/// Which twin supplies the pre-training stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    /// The global twin built from the history prefix.
    #[default]
    Global,
    /// An untrained twin (uniform forecasts).
    Blank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    /// Number of BS clusters.
    pub clusters: usize,
    pub affinity: AffinityConfig,
    pub sync: TwinSyncConfig,
    /// Requests of history used to bootstrap the local twins.
    pub history_requests: u64,
    /// Forecast requests the agent trains on before deployment.
    pub pretrain_requests: u64,
    pub pretrain_source: PretrainSource,
    /// Requests between local-twin refreshes and H-Twinning rounds.
    pub update_period: u64,
    /// Requests between re-clusterings.
    pub recluster_period: u64,
    /// Most recent requests per BS kept for twin refreshes.
    pub history_window: usize,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            clusters: 2,
            affinity: AffinityConfig::default(),
            sync: TwinSyncConfig::default(),
            history_requests: 20_000,
            pretrain_requests: 20_000,
            pretrain_source: PretrainSource::Global,
            update_period: 5_000,
            recluster_period: 10_000,
            history_window: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Requests served in the main run.
    pub requests: u64,
    /// Decision steps per metrics record.
    pub eval_window: u64,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Trailing share of the main run over which the final hit rate is
    /// measured.
    pub final_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            requests: 50_000,
            eval_window: 500,
            seeds: vec![1],
            out_dir: None,
            final_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub workload: WorkloadConfig,
    pub policy: PolicyConfig,
    pub reliability: ReliabilityConfig,
    pub twin: TwinConfig,
    pub run: RunConfig,
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::config("<toml>", e.to_string())
}

impl ExperimentConfig {
    pub fn shipped_defaults() -> Self {
        toml::from_str(DEFAULTS_TOML).expect("shipped defaults parse")
    }

    /// Parses `text` layered over the shipped defaults: tables merge key by
    /// key and anything `text` leaves out keeps its default.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(toml_err)?;
        let mut merged: toml::Table = toml::from_str(DEFAULTS_TOML).expect("shipped defaults parse");
        merge_tables(&mut merged, user);
        merged.try_into().map_err(toml_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_err)
    }

    /// Applies `key=value` overrides on dotted paths. Values parse as TOML
    /// literals and fall back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(toml_err)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item.clone(), "override must look like key=value"))?;
            let key = key.trim();
            let value = parse_literal(raw.trim());
            set_path(&mut root, key, value)?;
        }
        let text = toml::to_string(&root).map_err(toml_err)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.workload.trace.is_none() {
            self.workload.model.validate()?;
        }
        self.policy.agent.validate()?;
        self.reliability.validate()?;
        self.twin.affinity.validate()?;
        self.twin.sync.validate()?;
        if self.twin.clusters == 0 || self.twin.clusters > self.network.n_bs {
            return Err(Error::config("twin.clusters", format!("must lie in [1, {}]", self.network.n_bs)));
        }
        if self.twin.history_window == 0 {
            return Err(Error::config("twin.history_window", "must be >= 1"));
        }
        if self.uses_twin() && self.twin.history_requests == 0 {
            return Err(Error::config("twin.history_requests", "must be >= 1 for twin-trained policies"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "seed list must not be empty"));
        }
        if self.run.eval_window == 0 {
            return Err(Error::config("run.eval_window", "must be >= 1"));
        }
        if !(self.run.final_fraction > 0.0 && self.run.final_fraction <= 1.0) {
            return Err(Error::config("run.final_fraction", "must lie in (0, 1]"));
        }
        let n_clients = self.network.n_clients();
        if let crate::netmodel::CoverageLayout::Explicit { sets } = &self.network.coverage {
            if sets.len() != n_clients {
                return Err(Error::config(
                    "network.coverage.sets",
                    format!("{} sets for {n_clients} clients", sets.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn uses_twin(&self) -> bool {
        self.policy.kind == PolicyKind::DRec
    }

    /// Module switches as applied to the configured policy.
    pub fn effective_reliability(&self) -> ReliabilityConfig {
        let mut r = self.reliability.clone();
        match self.policy.kind {
            PolicyKind::Rec => {
                r.enable_state = true;
                r.enable_action = false;
                r.enable_reward = false;
            }
            PolicyKind::DRec => {}
            _ => {
                r.enable_state = false;
                r.enable_action = false;
                r.enable_reward = false;
            }
        }
        r
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = table
            .entry((*part).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// One record per evaluation window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Decision steps so far.
    pub step: u64,
    /// Cumulative hit rate of the run.
    pub hit_rate: f64,
    pub loads: Vec<f64>,
    pub mutations: u64,
    /// Mean (shaped) reward over the window.
    pub reward_mean: f64,
    /// Mean raw reward over the window.
    pub raw_reward_mean: f64,
}

/// End-of-run figures of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub requests: u64,
    pub decisions: u64,
    pub hits: u64,
    /// Cumulative hit rate of the main run.
    pub hit_rate: f64,
    /// Hit rate over the trailing `final_fraction` of the main run.
    pub final_hit_rate: f64,
    pub final_loads: Vec<f64>,
    /// Max minus min of the final normalized loads.
    pub load_spread: f64,
    pub mutations: u64,
    pub policy_errors: u64,
    pub twin_updates: u64,
    pub clusters: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub summary: SeedSummary,
    pub records: Vec<MetricsRecord>,
    pub interventions: InterventionLog,
    /// Cumulative mutation count after each decision step.
    pub mutation_trace: Vec<u64>,
    pub agent: Option<Agent>,
    pub global_twin: Option<TwinModel>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub runs: Vec<SeedRun>,
}

impl ExperimentOutput {
    pub fn mean_of(&self, f: impl Fn(&SeedSummary) -> f64) -> f64 {
        self.runs.iter().map(|r| f(&r.summary)).sum::<f64>() / self.runs.len() as f64
    }
}

/// splitmix64 of `seed` mixed with a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_HISTORY: u64 = 1;
const TAG_MAIN: u64 = 2;
const TAG_PRETRAIN: u64 = 3;
const TAG_AGENT: u64 = 4;
const TAG_EXPLORE: u64 = 5;
const TAG_POLICY: u64 = 6;
const TAG_MUTE: u64 = 7;
const TAG_TRACE: u64 = 8;

/// Request events of one seed: a history prefix for the twins and the
/// main-run source.
struct Sources {
    catalogue: usize,
    history: Vec<RequestEvent>,
    main: EventSource,
    budget: u64,
}

fn build_sources(cfg: &ExperimentConfig, seed: u64) -> Result<Sources> {
    let n_clients = cfg.network.n_clients();
    let history_len = if cfg.uses_twin() { cfg.twin.history_requests } else { 0 };
    match &cfg.workload.trace {
        Some(path) => {
            let cap = cfg
                .workload
                .trace_catalogue_cap
                .unwrap_or(10 * cfg.network.cap * cfg.network.n_bs);
            let opts = TraceOptions {
                catalogue_cap: cap,
                n_clients,
                seed: derive_seed(seed, TAG_TRACE),
            };
            let trace = load_trace(path, &opts)?;
            let split = (history_len as usize).min(trace.events.len());
            let mut events = trace.events;
            let main: Vec<RequestEvent> = events.split_off(split);
            Ok(Sources {
                catalogue: cap.max(trace.catalogue_size),
                history: events,
                budget: cfg.run.requests.min(main.len() as u64),
                main: EventSource::Replay { events: main, pos: 0 },
            })
        }
        None => {
            let mut model = cfg.workload.model.clone();
            model.seed = derive_seed(model.seed, seed);
            let workload = Workload::new(model)?;
            let history: Vec<RequestEvent> =
                RequestStream::new(workload.clone(), n_clients, derive_seed(seed, TAG_HISTORY))
                    .take(history_len as usize)
                    .collect();
            Ok(Sources {
                catalogue: workload.catalogue_size(),
                history,
                main: EventSource::Synthetic(RequestStream::new(workload, n_clients, derive_seed(seed, TAG_MAIN))),
                budget: cfg.run.requests,
            })
        }
    }
}

/// Feature encoder for the agent of `cfg`.
pub fn state_encoder(cfg: &ExperimentConfig, extended: bool) -> StateEncoder {
    StateEncoder {
        time_scale: cfg.network.load_window as f64,
        freq_scale: cfg.network.popularity_window as f64,
        ..StateEncoder::new(cfg.network.n_bs, cfg.network.n_clients(), extended)
    }
}

/// The main-run environment of `seed`, for driving with an external agent.
pub fn main_env(cfg: &ExperimentConfig, seed: u64) -> Result<CacheEnv> {
    cfg.validate()?;
    let sources = build_sources(cfg, seed)?;
    let net = Network::new(cfg.network.clone(), sources.catalogue)?;
    Ok(CacheEnv::new(net, sources.main, Some(sources.budget)))
}

/// Twins bootstrapped from the history of `seed`, as a D-REC run would
/// build them before pre-training.
pub fn seed_twins(cfg: &ExperimentConfig, seed: u64) -> Result<TwinState> {
    let mut cfg = cfg.clone();
    cfg.policy.kind = PolicyKind::DRec;
    let sources = build_sources(&cfg, seed)?;
    if sources.history.is_empty() {
        return Err(Error::config("twin.history_requests", "no history to train twins on"));
    }
    let net = Network::new(cfg.network.clone(), sources.catalogue)?;
    bootstrap_twins(&net, &sources.history, sources.catalogue, &cfg.twin)
}

/// Clients covered by each BS.
fn clients_per_bs(net: &Network) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new(); net.n_bs()];
    for j in 0..net.config().n_clients() {
        for &bs in net.coverage(j).expect("validated coverage") {
            out[bs].insert(j);
        }
    }
    out
}

/// Local twins, their clustering and the federated models.
#[derive(Clone, Debug)]
pub struct TwinState {
    pub locals: Vec<TwinModel>,
    pub clusters: ClusterAssignment,
    pub cluster_twins: Vec<TwinModel>,
    pub global: TwinModel,
    /// Recent requests seen by each BS.
    pub windows: Vec<VecDeque<RequestEvent>>,
    pub updates: u64,
}

impl TwinState {
    fn push(&mut self, bs_of_client: &[Vec<usize>], ev: &RequestEvent, cap: usize) {
        for &bs in &bs_of_client[ev.client] {
            let w = &mut self.windows[bs];
            if w.len() == cap {
                w.pop_front();
            }
            w.push_back(*ev);
        }
    }
}

fn descriptors(net: &Network, windows: &[VecDeque<RequestEvent>], catalogue: usize) -> Vec<BsDescriptor> {
    let cfg = net.config();
    let clients = clients_per_bs(net);
    cfg.positions()
        .into_iter()
        .zip(cfg.backhaul())
        .zip(clients)
        .zip(windows)
        .map(|(((position, backhaul), clients), w)| BsDescriptor {
            position,
            backhaul,
            clients,
            request_pmf: empirical_distribution(w.iter(), catalogue),
        })
        .collect()
}

/// Clusters the BSs; if the affinity graph is already split into more
/// components than requested, those components are the clusters.
pub fn cluster_bss(bss: &[BsDescriptor], affinity: &AffinityConfig, target: usize) -> Result<ClusterAssignment> {
    let phi = affinity_matrix(bss, affinity)?;
    let components = AffinityGraph::from_affinity(&phi).components();
    let n_components = components.iter().max().map_or(0, |m| m + 1);
    if n_components > target {
        log::warn!("affinity graph has {n_components} components; using them as clusters");
        return Ok(ClusterAssignment { cluster_of: components });
    }
    dcs_cluster(&phi, target)
}

/// Trains local twins on the history, clusters the BSs and V-Twins.
pub fn bootstrap_twins(
    net: &Network,
    history: &[RequestEvent],
    catalogue: usize,
    cfg: &TwinConfig,
) -> Result<TwinState> {
    let coverage: Vec<Vec<usize>> = (0..net.config().n_clients())
        .map(|j| net.coverage(j).map(<[usize]>::to_vec))
        .collect::<Result<_>>()?;
    let mut windows = vec![VecDeque::new(); net.n_bs()];
    for ev in history {
        for &bs in &coverage[ev.client] {
            windows[bs].push_back(*ev);
        }
    }
    for w in &mut windows {
        while w.len() > cfg.history_window {
            w.pop_front();
        }
    }
    let blank = TwinModel::blank(catalogue);
    let locals = windows
        .iter_mut()
        .map(|w| {
            if w.is_empty() {
                Ok(blank.clone())
            } else {
                train_local_twin(w.make_contiguous(), &blank, &cfg.sync)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let clusters = cluster_bss(&descriptors(net, &windows, catalogue), &cfg.affinity, cfg.clusters)?;
    let (cluster_twins, global) = v_twinning(&locals, &clusters, cfg.sync.size_weighted_global)?;
    Ok(TwinState {
        locals,
        clusters,
        cluster_twins,
        global,
        windows,
        updates: 0,
    })
}

/// Refreshes local twins on their recent windows and runs one H-Twinning
/// round; re-clusters first when `recluster` is set.
fn refresh_twins(ts: &mut TwinState, net: &Network, catalogue: usize, cfg: &TwinConfig, recluster: bool) -> Result<()> {
    for (local, w) in ts.locals.iter_mut().zip(ts.windows.iter_mut()) {
        if !w.is_empty() {
            *local = train_local_twin(w.make_contiguous(), local, &cfg.sync)?;
        }
    }
    if recluster {
        ts.clusters = cluster_bss(&descriptors(net, &ts.windows, catalogue), &cfg.affinity, cfg.clusters)?;
    }
    let out = h_twinning(&ts.locals, &ts.clusters, &ts.global, cfg.sync.threshold, None, cfg.sync.size_weighted_global)?;
    if out.updated() {
        ts.updates += 1;
    }
    ts.global = out.global;
    ts.cluster_twins = crate::twin::cluster_models(&ts.locals, &ts.clusters)?;
    Ok(())
}

/// Decision maker of a run.
enum Controller {
    Classical {
        kind: PolicyKind,
        mode: FrequencyMode,
        rng: ChaCha8Rng,
    },
    Learning {
        agent: Box<Agent>,
        encoder: StateEncoder,
        explore: ChaCha8Rng,
    },
}

/// Actions a learning policy may take for a request: skip plus every slot
/// of a covering BS.
pub fn allowed_actions(net: &Network, client: usize) -> Result<Vec<bool>> {
    let cap = net.cap();
    let mut mask = vec![false; net.config().n_actions()];
    mask[0] = true;
    for &bs in net.coverage(client)? {
        mask[1 + bs * cap..1 + (bs + 1) * cap].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

/// Accumulates per-window metrics during a phase.
struct PhaseStats {
    records: Vec<MetricsRecord>,
    window_reward: f64,
    window_raw: f64,
    window_n: u64,
    mutation_trace: Vec<u64>,
}

struct PhaseResult {
    stats: PhaseStats,
    log: InterventionLog,
    final_window_hits: u64,
    final_window_requests: u64,
}

/// Runs `env` to exhaustion under `ctl`, training a learning controller on
/// every transition. `twins` are refreshed along the way when given.
#[allow(clippy::too_many_arguments)]
fn drive(
    env: &mut CacheEnv,
    ctl: &mut Controller,
    rel: &ReliabilityConfig,
    mute_rng: &mut ChaCha8Rng,
    eval_window: u64,
    final_from: u64,
    mut twins: Option<(&mut TwinState, &TwinConfig, usize)>,
) -> Result<PhaseResult> {
    let n_bs = env.network().n_bs();
    let coverage: Vec<Vec<usize>> = (0..env.network().config().n_clients())
        .map(|j| env.network().coverage(j).map(<[usize]>::to_vec))
        .collect::<Result<_>>()?;
    let mut stats = PhaseStats {
        records: Vec::new(),
        window_reward: 0.0,
        window_raw: 0.0,
        window_n: 0,
        mutation_trace: Vec::new(),
    };
    let mut log = InterventionLog::default();
    if twins.is_some() {
        env.track_served();
    }
    let mut next_update = twins.as_ref().map_or(u64::MAX, |(_, c, _)| c.update_period.max(1));
    let mut next_recluster = twins.as_ref().map_or(u64::MAX, |(_, c, _)| c.recluster_period.max(1));
    let mut final_marker: Option<(u64, u64)> = None;
    let mut step = 0u64;

    env.advance()?;
    env.mark_reward_baseline();
    loop {
        // Twin bookkeeping sees every served request, decisions or not.
        let requests = env.network().counter().requests;
        if final_marker.is_none() && requests >= final_from {
            let c = env.network().counter();
            final_marker = Some((c.requests, c.hits));
        }
        if let Some((ts, tcfg, catalogue)) = twins.as_mut() {
            let served = env.take_served();
            for ev in &served {
                ts.push(&coverage, ev, tcfg.history_window);
            }
            if requests >= next_update {
                let recluster = requests >= next_recluster;
                refresh_twins(ts, env.network(), *catalogue, tcfg, recluster)?;
                next_update += tcfg.update_period.max(1);
                if recluster {
                    next_recluster += tcfg.recluster_period.max(1);
                }
            }
        }
        let Some(obs) = env.pending().cloned() else { break };
        let client = obs.event.client;
        let (action, encoded) = match ctl {
            Controller::Classical { kind, mode, rng } => {
                let net = env.network();
                let a = decide_with(*kind, obs.serving_bs, net.unit(obs.serving_bs), &obs.event, *mode, Some(net.popularity()), rng)?;
                (a, None)
            }
            Controller::Learning { agent, encoder, explore } => {
                let s = encode(encoder, &obs, rel);
                let mask = allowed_actions(env.network(), client)?;
                let a = agent.select_action(&s, Some(&mask), explore)?;
                (a, Some(s))
            }
        };
        let (action, _) = intervene_action(action, client, &obs.loads, env.network(), rel, step, mute_rng, &mut log)?;
        let out = env.step(action)?;
        step += 1;
        stats.mutation_trace.push(log.mutation_count);
        let loads_after = env.network().loads();
        let shaped = if rel.enable_reward {
            shape_reward(out.reward, &loads_after, rel.phi, n_bs)
        } else {
            out.reward
        };
        if let (Controller::Learning { agent, encoder, .. }, Some(s)) = (&mut *ctl, encoded) {
            let (next_state, next_allowed) = match &out.next {
                Some(next) => (encode(encoder, next, rel), allowed_actions(env.network(), next.event.client)?),
                None => (vec![0.0; encoder.dim()], Vec::new()),
            };
            agent.observe(Transition {
                state: s,
                action: action.0,
                reward: shaped,
                penalty: out.penalty,
                next_state,
                next_allowed,
                terminal: out.done(),
            })?;
        }
        stats.window_reward += shaped;
        stats.window_raw += out.reward;
        stats.window_n += 1;
        if step % eval_window == 0 {
            push_record(&mut stats, env, step, log.mutation_count);
        }
    }
    if stats.window_n > 0 {
        push_record(&mut stats, env, step, log.mutation_count);
    }
    let c = env.network().counter();
    let (r0, h0) = final_marker.unwrap_or((c.requests, c.hits));
    Ok(PhaseResult {
        stats,
        log,
        final_window_hits: c.hits - h0,
        final_window_requests: c.requests - r0,
    })
}

fn encode(encoder: &StateEncoder, obs: &Observation, rel: &ReliabilityConfig) -> Vec<f64> {
    let s = extend_state(obs.state.clone(), obs.event.client, &obs.loads, rel.enable_state);
    encoder.encode(&s)
}

fn push_record(stats: &mut PhaseStats, env: &CacheEnv, step: u64, mutations: u64) {
    let n = stats.window_n.max(1) as f64;
    stats.records.push(MetricsRecord {
        step,
        hit_rate: env.network().counter().hit_rate().unwrap_or(0.0),
        loads: env.network().loads(),
        mutations,
        reward_mean: stats.window_reward / n,
        raw_reward_mean: stats.window_raw / n,
    });
    stats.window_reward = 0.0;
    stats.window_raw = 0.0;
    stats.window_n = 0;
}

/// One seed of an experiment: optional twin bootstrap, optional twin-driven
/// pre-training, and the main run.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let rel = cfg.effective_reliability();
    let sources = build_sources(cfg, seed)?;
    let catalogue = sources.catalogue;
    let net = Network::new(cfg.network.clone(), catalogue)?;
    let n_clients = cfg.network.n_clients();
    let kind = cfg.policy.kind;

    let mut twins = if cfg.uses_twin() && !sources.history.is_empty() {
        Some(bootstrap_twins(&net, &sources.history, catalogue, &cfg.twin)?)
    } else {
        None
    };

    let mut ctl = if kind.is_learning() {
        let encoder = state_encoder(cfg, rel.enable_state);
        let agent = Agent::new(
            cfg.policy.agent.clone(),
            encoder.dim(),
            cfg.network.n_actions(),
            derive_seed(seed, TAG_AGENT),
        )?;
        Controller::Learning {
            agent: Box::new(agent),
            encoder,
            explore: ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EXPLORE)),
        }
    } else {
        Controller::Classical {
            kind,
            mode: cfg.policy.frequency,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_POLICY)),
        }
    };
    let mut mute_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_MUTE));

    if let (Some(ts), true) = (&twins, kind.is_learning() && cfg.twin.pretrain_requests > 0) {
        let forecaster = match cfg.twin.pretrain_source {
            PretrainSource::Global => ts.global.clone(),
            PretrainSource::Blank => TwinModel::blank(catalogue),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PRETRAIN));
        let events = forecast_requests(&forecaster, cfg.twin.pretrain_requests as usize, n_clients, &mut rng)?;
        let mut env = CacheEnv::new(net.clone(), EventSource::Replay { events, pos: 0 }, None);
        drive(&mut env, &mut ctl, &rel, &mut mute_rng, cfg.run.eval_window, u64::MAX, None)?;
    }

    let final_from = sources.budget - ((sources.budget as f64 * cfg.run.final_fraction).round() as u64).min(sources.budget);
    let mut env = CacheEnv::new(net, sources.main, Some(sources.budget));
    let phase = drive(
        &mut env,
        &mut ctl,
        &rel,
        &mut mute_rng,
        cfg.run.eval_window,
        final_from,
        twins.as_mut().map(|t| (t, &cfg.twin, catalogue)),
    )
    .inspect_err(|e| {
        if let (Error::Divergence(_), Controller::Learning { agent, .. }, Some(dir)) = (e, &ctl, &cfg.run.out_dir) {
            let path = dir.join(format!("abort_seed_{seed}.json"));
            if std::fs::create_dir_all(dir).is_ok() && agent.save(&path).is_ok() {
                log::error!("training diverged; agent checkpoint written to {}", path.display());
            }
        }
    })?;

    let net = env.network();
    let counter = net.counter();
    let final_loads = net.loads();
    let spread = final_loads.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - final_loads.iter().copied().fold(f64::INFINITY, f64::min);
    let summary = SeedSummary {
        seed,
        requests: counter.requests,
        decisions: env.decisions(),
        hits: counter.hits,
        hit_rate: counter.hit_rate().unwrap_or(0.0),
        final_hit_rate: if phase.final_window_requests == 0 {
            0.0
        } else {
            phase.final_window_hits as f64 / phase.final_window_requests as f64
        },
        load_spread: spread,
        final_loads,
        mutations: phase.log.mutation_count,
        policy_errors: net.policy_errors(),
        twin_updates: twins.as_ref().map_or(0, |t| t.updates),
        clusters: twins.as_ref().map_or_else(Vec::new, |t| t.clusters.cluster_of.clone()),
    };
    Ok(SeedRun {
        summary,
        records: phase.stats.records,
        interventions: phase.log,
        mutation_trace: phase.stats.mutation_trace,
        agent: match ctl {
            Controller::Learning { agent, .. } => Some(*agent),
            Controller::Classical { .. } => None,
        },
        global_twin: twins.map(|t| t.global),
    })
}

/// Runs every configured seed and writes per-seed metrics, the summary,
/// intervention logs and checkpoints when an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        log::info!("{} seed {seed}", cfg.policy.kind);
        runs.push(run_seed(cfg, seed)?);
    }
    let out = ExperimentOutput { runs };
    if let Some(dir) = &cfg.run.out_dir {
        write_outputs(cfg, &out, dir)?;
    }
    Ok(out)
}

fn write_outputs(cfg: &ExperimentConfig, out: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_bs = cfg.network.n_bs;
    for run in &out.runs {
        let seed = run.summary.seed;
        emit_metrics(&run.records, n_bs, &dir.join(format!("metrics_seed_{seed}.csv")))?;
        run.interventions.write_csv(&dir.join(format!("interventions_seed_{seed}.csv")))?;
        if let Some(agent) = &run.agent {
            agent.save(&dir.join(format!("agent_seed_{seed}.json")))?;
        }
        if let Some(twin) = &run.global_twin {
            crate::twin::save_twin(&dir.join(format!("twin_seed_{seed}.bin")), twin, run.summary.requests)?;
        }
    }
    let finals: Vec<&MetricsRecord> = out.runs.iter().filter_map(|r| r.records.last()).collect();
    write_file(&dir.join("summary.csv"), &summary_csv(&finals, n_bs))?;
    write_file(&dir.join("runs.csv"), &runs_csv(out))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metrics_header(n_bs: usize) -> String {
    let mut h = String::from("step,hit_rate");
    for n in 0..n_bs {
        write!(h, ",load_{n}").expect("string write");
    }
    h.push_str(",mutations,reward_mean\n");
    h
}

/// Metrics CSV text: `step,hit_rate,load_0..load_{N-1},mutations,reward_mean`.
pub fn metrics_csv(records: &[MetricsRecord], n_bs: usize) -> String {
    let mut s = metrics_header(n_bs);
    for r in records {
        write!(s, "{},{}", r.step, r.hit_rate).expect("string write");
        for l in &r.loads {
            write!(s, ",{l}").expect("string write");
        }
        writeln!(s, ",{},{}", r.mutations, r.reward_mean).expect("string write");
    }
    s
}

pub fn emit_metrics(records: &[MetricsRecord], n_bs: usize, path: &Path) -> Result<()> {
    write_file(path, &metrics_csv(records, n_bs))
}

/// Sample mean and standard deviation (n - 1); the deviation of one value
/// is 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and deviation rows over the last record of every seed, in the
/// metrics column layout with a leading `stat` column.
pub fn summary_csv(finals: &[&MetricsRecord], n_bs: usize) -> String {
    let mut s = format!("stat,{}", metrics_header(n_bs));
    let cols: Vec<Vec<f64>> = {
        let mut cols = vec![finals.iter().map(|r| r.step as f64).collect::<Vec<_>>()];
        cols.push(finals.iter().map(|r| r.hit_rate).collect());
        for n in 0..n_bs {
            cols.push(finals.iter().map(|r| r.loads.get(n).copied().unwrap_or(f64::NAN)).collect());
        }
        cols.push(finals.iter().map(|r| r.mutations as f64).collect());
        cols.push(finals.iter().map(|r| r.reward_mean).collect());
        cols
    };
    for (name, pick) in [("mean", 0usize), ("sd", 1)] {
        s.push_str(name);
        for c in &cols {
            let (m, d) = mean_sd(c);
            write!(s, ",{}", if pick == 0 { m } else { d }).expect("string write");
        }
        s.push('\n');
    }
    s
}

fn runs_csv(out: &ExperimentOutput) -> String {
    let mut s = String::from("seed,requests,decisions,hit_rate,final_hit_rate,load_spread,mutations,policy_errors,twin_updates\n");
    for r in &out.runs {
        let m = &r.summary;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.seed, m.requests, m.decisions, m.hit_rate, m.final_hit_rate, m.load_spread, m.mutations, m.policy_errors, m.twin_updates
        )
        .expect("string write");
    }
    s
}

/// One row of a policy comparison, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: PolicyKind,
    pub hit_rate: f64,
    pub final_hit_rate: f64,
    pub max_load: f64,
    pub min_load: f64,
    pub mutations: f64,
}

/// Runs each policy on the same seeds, so all of them see the same request
/// events, and tabulates seed means.
pub fn compare_policies(cfg: &ExperimentConfig, policies: &[PolicyKind]) -> Result<Vec<PolicyRow>> {
    policies
        .iter()
        .map(|&p| {
            let mut c = cfg.clone();
            c.policy.kind = p;
            c.run.out_dir = cfg.run.out_dir.as_ref().map(|d| d.join(p.name()));
            let out = run_experiment(&c)?;
            Ok(PolicyRow {
                policy: p,
                hit_rate: out.mean_of(|s| s.hit_rate),
                final_hit_rate: out.mean_of(|s| s.final_hit_rate),
                max_load: out.mean_of(|s| s.final_loads.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                min_load: out.mean_of(|s| s.final_loads.iter().copied().fold(f64::INFINITY, f64::min)),
                mutations: out.mean_of(|s| s.mutations as f64),
            })
        })
        .collect()
}

pub fn comparison_table(rows: &[PolicyRow]) -> String {
    let mut s = String::from("policy,hit_rate,final_hit_rate,max_load,min_load,mutations\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4},{:.1}",
            r.policy, r.hit_rate, r.final_hit_rate, r.max_load, r.min_load, r.mutations
        )
        .expect("string write");
    }
    s
}
