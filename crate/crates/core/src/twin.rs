//! Network digital twins.
//!
//! A twin is a content-popularity forecaster: a logit vector over the
//! catalogue whose softmax predicts the next requested content. Local twins
//! are trained per BS, BSs are clustered by the affinity of their
//! attributes (distance, backhaul, coverage overlap, request similarity),
//! and twins are federated cluster-first (C-NDT) and then globally (G-NDT),
//! either synchronously (V-Twinning) or with a divergence gate
//! (H-Twinning).

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{RequestEvent, Workload};

/// Minimum distance substituted for coincident BS positions.
pub const MIN_DISTANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityConfig {
    /// Weight of inverse distance.
    pub w_distance: f64,
    /// Weight of backhaul-capacity similarity.
    pub w_backhaul: f64,
    /// Weight of coverage overlap.
    pub w_coverage: f64,
    /// Weight of request-distribution similarity.
    pub w_request: f64,
    /// Min-max scale each attribute term across BS pairs before weighting.
    pub normalize: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            w_distance: 0.25,
            w_backhaul: 0.25,
            w_coverage: 0.25,
            w_request: 0.25,
            normalize: true,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_distance, self.w_backhaul, self.w_coverage, self.w_request];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config("twin.affinity", "weights must be finite and >= 0"));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::config("twin.affinity", "at least one weight must be > 0"));
        }
        Ok(())
    }
}

/// What the twin subsystem knows about one BS.
#[derive(Clone, Debug, PartialEq)]
pub struct BsDescriptor {
    pub position: [f64; 2],
    pub backhaul: f64,
    pub clients: BTreeSet<usize>,
    pub request_pmf: Vec<f64>,
}

/// Raw pairwise attributes: distance `g`, backhaul similarity `k`, coverage
/// overlap `beta`, request similarity `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairAttributes {
    pub distance: f64,
    pub backhaul: f64,
    pub coverage: f64,
    pub request: f64,
}

pub fn pair_attributes(a: &BsDescriptor, b: &BsDescriptor) -> PairAttributes {
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    let mut distance = (dx * dx + dy * dy).sqrt();
    if distance < MIN_DISTANCE {
        log::warn!("coincident BS positions; distance clamped to {MIN_DISTANCE}");
        distance = MIN_DISTANCE;
    }
    let (lo, hi) = if a.backhaul <= b.backhaul {
        (a.backhaul, b.backhaul)
    } else {
        (b.backhaul, a.backhaul)
    };
    let backhaul = if hi > 0.0 { lo / hi } else { 1.0 };
    let union = a.clients.union(&b.clients).count();
    let coverage = if union == 0 {
        0.0
    } else {
        a.clients.intersection(&b.clients).count() as f64 / union as f64
    };
    let tv: f64 = 0.5
        * a.request_pmf
            .iter()
            .zip(&b.request_pmf)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    PairAttributes {
        distance,
        backhaul,
        coverage,
        request: (1.0 - tv).clamp(0.0, 1.0),
    }
}

/// Affinity `w_g / g + w_k k + w_beta beta + w_tau tau` of one BS pair.
pub fn attribute_affinity(attrs: &PairAttributes, cfg: &AffinityConfig) -> f64 {
    let g = attrs.distance.max(MIN_DISTANCE);
    cfg.w_distance / g
        + cfg.w_backhaul * attrs.backhaul
        + cfg.w_coverage * attrs.coverage
        + cfg.w_request * attrs.request
}

/// Symmetric non-negative affinity matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn zeros(n: usize) -> Self {
        AffinityMatrix {
            n,
            values: vec![0.0; n * n],
        }
    }

    /// Builds a matrix from its upper triangle; the diagonal is ignored.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = AffinityMatrix::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                m.set(i, j, f(i, j))?;
            }
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::domain("affinity matrix must be square"));
        }
        for i in 0..n {
            for j in 0..n {
                if (rows[i][j] - rows[j][i]).abs() > 1e-12 * rows[i][j].abs().max(1.0) {
                    return Err(Error::domain("affinity matrix must be symmetric"));
                }
            }
        }
        AffinityMatrix::from_fn(n, |i, j| rows[i][j])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::domain(format!("affinity ({i},{j}) = {v} must be finite and >= 0")));
        }
        if i == j {
            return Ok(());
        }
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        AffinityMatrix::from_fn(self.n, |i, j| self.get(i, j) * s)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in values.iter_mut() {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 1.0 };
    }
}

/// Affinity over all BS pairs. With `normalize`, each of the four terms
/// (inverse distance included) is min-max scaled across pairs first.
pub fn affinity_matrix(bss: &[BsDescriptor], cfg: &AffinityConfig) -> Result<AffinityMatrix> {
    cfg.validate()?;
    let n = bss.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let attrs: Vec<PairAttributes> = pairs
        .iter()
        .map(|&(i, j)| pair_attributes(&bss[i], &bss[j]))
        .collect();
    let mut m = AffinityMatrix::zeros(n);
    if !cfg.normalize {
        for (&(i, j), a) in pairs.iter().zip(&attrs) {
            m.set(i, j, attribute_affinity(a, cfg))?;
        }
        return Ok(m);
    }
    let mut prox: Vec<f64> = attrs.iter().map(|a| 1.0 / a.distance).collect();
    let mut back: Vec<f64> = attrs.iter().map(|a| a.backhaul).collect();
    let mut cov: Vec<f64> = attrs.iter().map(|a| a.coverage).collect();
    let mut req: Vec<f64> = attrs.iter().map(|a| a.request).collect();
    for v in [&mut prox, &mut back, &mut cov, &mut req] {
        min_max(v);
    }
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let v = cfg.w_distance * prox[p]
            + cfg.w_backhaul * back[p]
            + cfg.w_coverage * cov[p]
            + cfg.w_request * req[p];
        m.set(i, j, v)?;
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Betweenness and clustering
// ---------------------------------------------------------------------------

/// Undirected edge `(i, j)` with `i < j`.
pub type Edge = (usize, usize);

/// Weighted undirected graph; an edge exists where affinity is positive and
/// its length is the inverse affinity.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    n: usize,
    length: Vec<Option<f64>>,
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl AffinityGraph {
    pub fn from_affinity(phi: &AffinityMatrix) -> Self {
        let n = phi.n();
        let mut length = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = phi.get(i, j);
                if i != j && v > 0.0 {
                    length[i * n + j] = Some(1.0 / v);
                }
            }
        }
        AffinityGraph { n, length }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self, i: usize, j: usize) -> Option<f64> {
        self.length[i * self.n + j]
    }

    pub fn edges(&self) -> Vec<Edge> {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.length(i, j).is_some())
            .collect()
    }

    pub fn remove_edge(&mut self, (i, j): Edge) {
        self.length[i * self.n + j] = None;
        self.length[j * self.n + i] = None;
    }

    fn neighbours(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n).filter_map(move |w| self.length(v, w).map(|l| (w, l)))
    }

    /// Component label per node, numbered in order of lowest member.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.n];
        let mut next = 0;
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut queue = VecDeque::from([start]);
            label[start] = next;
            while let Some(v) = queue.pop_front() {
                for (w, _) in self.neighbours(v) {
                    if label[w] == usize::MAX {
                        label[w] = next;
                        queue.push_back(w);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// Betweenness of every edge over unordered node pairs: the sum of the
    /// fraction of shortest paths between each pair that use the edge.
    /// Disconnected pairs contribute nothing.
    pub fn edge_betweenness(&self) -> Vec<(Edge, f64)> {
        let n = self.n;
        let mut score = vec![0.0; n * n];
        for s in 0..n {
            // Dijkstra from s, counting shortest paths (Brandes).
            let mut dist = vec![f64::INFINITY; n];
            let mut sigma = vec![0.0f64; n];
            let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut done = vec![false; n];
            let mut order = Vec::with_capacity(n);
            dist[s] = 0.0;
            sigma[s] = 1.0;
            loop {
                let mut v = None;
                for u in 0..n {
                    if !done[u] && dist[u].is_finite() && v.is_none_or(|x: usize| dist[u] < dist[x]) {
                        v = Some(u);
                    }
                }
                let Some(v) = v else { break };
                done[v] = true;
                order.push(v);
                for (w, len) in self.neighbours(v) {
                    if done[w] {
                        continue;
                    }
                    let alt = dist[v] + len;
                    if dist[w].is_finite() && approx_eq(alt, dist[w]) {
                        sigma[w] += sigma[v];
                        preds[w].push(v);
                    } else if alt < dist[w] {
                        dist[w] = alt;
                        sigma[w] = sigma[v];
                        preds[w] = vec![v];
                    }
                }
            }
            let mut delta = vec![0.0; n];
            for &w in order.iter().rev() {
                for &v in &preds[w] {
                    let c = sigma[v] / sigma[w] * (1.0 + delta[w]);
                    let (a, b) = if v < w { (v, w) } else { (w, v) };
                    score[a * n + b] += c;
                    delta[v] += c;
                }
            }
        }
        self.edges()
            .into_iter()
            .map(|(i, j)| ((i, j), score[i * n + j] / 2.0))
            .collect()
    }
}

/// Edge with the highest betweenness; near-ties (relative 1e-9) go to the
/// lexicographically smallest edge.
pub fn max_betweenness_edge(scores: &[(Edge, f64)]) -> Option<Edge> {
    let best = scores.iter().map(|&(_, b)| b).fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .filter(|&&(_, b)| approx_eq(b, best))
        .map(|&(e, _)| e)
        .min()
}

pub fn edge_betweenness(phi: &AffinityMatrix) -> Result<Vec<(Edge, f64)>> {
    if phi.n() < 2 {
        return Err(Error::domain("betweenness needs at least two nodes"));
    }
    Ok(AffinityGraph::from_affinity(phi).edge_betweenness())
}

/// Cluster id per BS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cluster_of: Vec<usize>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.cluster_of.iter().max().map_or(0, |m| m + 1)
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|&(_, &k)| k == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Partition as sorted member lists, independent of cluster numbering.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut p: Vec<Vec<usize>> = (0..self.n_clusters()).map(|c| self.members(c)).collect();
        p.sort();
        p
    }
}

/// Removes the highest-betweenness edge, recomputing betweenness after every
/// removal, until exactly `target` connected components remain.
pub fn dcs_cluster(phi: &AffinityMatrix, target: usize) -> Result<ClusterAssignment> {
    let n = phi.n();
    if target == 0 || target > n {
        return Err(Error::domain(format!("cluster count {target} outside [1, {n}]")));
    }
    let mut graph = AffinityGraph::from_affinity(phi);
    let mut labels = graph.components();
    let count = |l: &[usize]| l.iter().max().map_or(0, |m| m + 1);
    if count(&labels) > target {
        return Err(Error::domain(format!(
            "affinity graph already has {} components, more than {target}",
            count(&labels)
        )));
    }
    while count(&labels) < target {
        let scores = graph.edge_betweenness();
        let edge = max_betweenness_edge(&scores).expect("a graph with fewer than n components has edges");
        graph.remove_edge(edge);
        labels = graph.components();
    }
    Ok(ClusterAssignment { cluster_of: labels })
}

// ---------------------------------------------------------------------------
// Twin models and federation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinSyncConfig {
    /// H-Twinning divergence threshold.
    pub threshold: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the history per local training round.
    pub epochs: usize,
    /// Weight clusters by membership size in the global aggregate.
    pub size_weighted_global: bool,
}

impl Default for TwinSyncConfig {
    fn default() -> Self {
        TwinSyncConfig {
            threshold: 0.01,
            learning_rate: 0.1,
            batch_size: 64,
            epochs: 50,
            size_weighted_global: false,
        }
    }
}

impl TwinSyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::config("twin.sync.threshold", "must be > 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("twin.sync.learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("twin.sync.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Popularity logits over the catalogue and an update counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinModel {
    pub params: Vec<f64>,
    pub version: u64,
}

impl TwinModel {
    /// Uniform forecaster.
    pub fn blank(catalogue: usize) -> Self {
        TwinModel {
            params: vec![0.0; catalogue],
            version: 0,
        }
    }

    pub fn from_params(params: Vec<f64>) -> Self {
        TwinModel { params, version: 0 }
    }

    pub fn catalogue_size(&self) -> usize {
        self.params.len()
    }

    /// Softmax of the logits.
    pub fn pmf(&self) -> Vec<f64> {
        softmax(&self.params)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Fits the logits to the history by mini-batch gradient descent on the
/// cross-entropy of the next requested content. Batches follow history
/// order.
pub fn train_local_twin(
    history: &[RequestEvent],
    prev: &TwinModel,
    cfg: &TwinSyncConfig,
) -> Result<TwinModel> {
    if history.is_empty() {
        return Err(Error::Contract("twin training needs a non-empty history".into()));
    }
    let n = prev.catalogue_size();
    let mut params = prev.params.clone();
    let mut target = vec![0.0; n];
    for _ in 0..cfg.epochs.max(1) {
        for batch in history.chunks(cfg.batch_size.max(1)) {
            target.iter_mut().for_each(|t| *t = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for ev in batch {
                if let Some(t) = target.get_mut(ev.content.index()) {
                    *t += inv;
                }
            }
            let p = softmax(&params);
            for ((a, p), t) in params.iter_mut().zip(&p).zip(&target) {
                *a -= cfg.learning_rate * (p - t);
            }
        }
    }
    Ok(TwinModel {
        params,
        version: prev.version + 1,
    })
}

fn check_lengths(models: &[&TwinModel]) -> Result<usize> {
    let len = models
        .first()
        .ok_or_else(|| Error::Aggregation("no models to aggregate".into()))?
        .params
        .len();
    if models.iter().any(|m| m.params.len() != len) {
        return Err(Error::Aggregation("parameter vectors differ in length".into()));
    }
    Ok(len)
}

/// Dimension-wise weighted mean of parameter vectors.
fn weighted_mean(models: &[&TwinModel], weights: &[f64]) -> Result<Vec<f64>> {
    let len = check_lengths(models)?;
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; len];
    for (m, &w) in models.iter().zip(weights) {
        for (o, &x) in out.iter_mut().zip(&m.params) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// FedAvg: dimension-wise arithmetic mean.
pub fn fed_avg(models: &[&TwinModel]) -> Result<TwinModel> {
    let w = vec![1.0; models.len()];
    let version = models.iter().map(|m| m.version).max().unwrap_or(0);
    Ok(TwinModel {
        params: weighted_mean(models, &w)?,
        version,
    })
}

/// Per-cluster means of the member BSs' local models.
pub fn cluster_models(locals: &[TwinModel], clusters: &ClusterAssignment) -> Result<Vec<TwinModel>> {
    if locals.len() != clusters.cluster_of.len() {
        return Err(Error::Aggregation(format!(
            "{} local models for {} BSs",
            locals.len(),
            clusters.cluster_of.len()
        )));
    }
    (0..clusters.n_clusters())
        .map(|c| {
            let members: Vec<&TwinModel> = clusters.members(c).into_iter().map(|i| &locals[i]).collect();
            if members.is_empty() {
                return Err(Error::Aggregation(format!("cluster {c} has no models")));
            }
            fed_avg(&members)
        })
        .collect()
}

fn global_from_clusters(
    cluster_twins: &[TwinModel],
    clusters: &ClusterAssignment,
    size_weighted: bool,
) -> Result<TwinModel> {
    let refs: Vec<&TwinModel> = cluster_twins.iter().collect();
    let weights: Vec<f64> = if size_weighted {
        (0..cluster_twins.len())
            .map(|c| clusters.members(c).len() as f64)
            .collect()
    } else {
        vec![1.0; cluster_twins.len()]
    };
    Ok(TwinModel {
        params: weighted_mean(&refs, &weights)?,
        version: refs.iter().map(|m| m.version).max().unwrap_or(0) + 1,
    })
}

/// Synchronous federation: C-NDTs are member means, the G-NDT is the mean
/// of the C-NDTs (equal cluster weights unless `size_weighted`).
pub fn v_twinning(
    locals: &[TwinModel],
    clusters: &ClusterAssignment,
    size_weighted: bool,
) -> Result<(Vec<TwinModel>, TwinModel)> {
    let cluster_twins = cluster_models(locals, clusters)?;
    let global = global_from_clusters(&cluster_twins, clusters, size_weighted)?;
    Ok((cluster_twins, global))
}

/// Mean squared element-wise difference.
pub fn divergence(a: &TwinModel, b: &TwinModel) -> Result<f64> {
    if a.params.len() != b.params.len() {
        return Err(Error::domain("twin models differ in length"));
    }
    if a.params.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .params
        .iter()
        .zip(&b.params)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.params.len() as f64)
}

/// Result of one H-Twinning round.
#[derive(Clone, Debug, PartialEq)]
pub struct HTwinOutcome {
    pub global: TwinModel,
    /// Per processed cluster, in arrival order: (cluster, divergence, fired).
    pub decisions: Vec<(usize, f64, bool)>,
}

impl HTwinOutcome {
    pub fn updated(&self) -> bool {
        self.decisions.iter().any(|d| d.2)
    }
}

/// Asynchronous, divergence-gated federation. Clusters are processed in
/// `arrival` order (all clusters in index order when `None`); each arriving
/// C-NDT is compared with the current G-NDT and, when the divergence
/// exceeds `threshold`, the G-NDT becomes the mean of all current C-NDTs.
pub fn h_twinning(
    locals: &[TwinModel],
    clusters: &ClusterAssignment,
    current_global: &TwinModel,
    threshold: f64,
    arrival: Option<&[usize]>,
    size_weighted: bool,
) -> Result<HTwinOutcome> {
    let cluster_twins = cluster_models(locals, clusters)?;
    let default_order: Vec<usize> = (0..cluster_twins.len()).collect();
    let order = arrival.unwrap_or(&default_order);
    let mut global = current_global.clone();
    let mut decisions = Vec::with_capacity(order.len());
    for &c in order {
        let twin = cluster_twins
            .get(c)
            .ok_or_else(|| Error::Aggregation(format!("unknown cluster {c}")))?;
        let eps = divergence(twin, &global).map_err(|e| Error::Aggregation(e.to_string()))?;
        let fire = eps > threshold;
        if fire {
            let mut next = global_from_clusters(&cluster_twins, clusters, size_weighted)?;
            next.version = global.version + 1;
            global = next;
        }
        decisions.push((c, eps, fire));
    }
    Ok(HTwinOutcome { global, decisions })
}

/// Thread-safe H-Twinning endpoint. Cluster submissions are serialized and
/// applied one at a time; readers always see a complete global model.
#[derive(Debug)]
pub struct HTwinAggregator {
    cluster_twins: Mutex<Vec<TwinModel>>,
    sizes: Vec<f64>,
    global: RwLock<TwinModel>,
    threshold: f64,
}

impl HTwinAggregator {
    pub fn new(
        cluster_twins: Vec<TwinModel>,
        clusters: &ClusterAssignment,
        global: TwinModel,
        cfg: &TwinSyncConfig,
    ) -> Self {
        let sizes = (0..cluster_twins.len())
            .map(|c| {
                if cfg.size_weighted_global {
                    clusters.members(c).len() as f64
                } else {
                    1.0
                }
            })
            .collect();
        HTwinAggregator {
            cluster_twins: Mutex::new(cluster_twins),
            sizes,
            global: RwLock::new(global),
            threshold: cfg.threshold,
        }
    }

    /// Records a fresh C-NDT for `cluster`; returns whether the G-NDT moved.
    pub fn submit(&self, cluster: usize, twin: TwinModel) -> Result<bool> {
        let mut twins = self.cluster_twins.lock().expect("aggregator lock poisoned");
        let slot = twins
            .get_mut(cluster)
            .ok_or_else(|| Error::Aggregation(format!("unknown cluster {cluster}")))?;
        if slot.params.len() != twin.params.len() {
            return Err(Error::Aggregation("parameter vectors differ in length".into()));
        }
        *slot = twin;
        let current = self.global.read().expect("global lock poisoned").clone();
        let eps = divergence(&twins[cluster], &current)?;
        if eps <= self.threshold {
            return Ok(false);
        }
        let refs: Vec<&TwinModel> = twins.iter().collect();
        let next = TwinModel {
            params: weighted_mean(&refs, &self.sizes)?,
            version: current.version + 1,
        };
        *self.global.write().expect("global lock poisoned") = next;
        Ok(true)
    }

    pub fn global(&self) -> TwinModel {
        self.global.read().expect("global lock poisoned").clone()
    }
}

/// Samples `horizon` requests from the twin's forecast; clients are drawn
/// uniformly.
pub fn forecast_requests<R: Rng + ?Sized>(
    twin: &TwinModel,
    horizon: usize,
    n_clients: usize,
    rng: &mut R,
) -> Result<Vec<RequestEvent>> {
    if horizon == 0 {
        return Err(Error::Contract("forecast horizon must be >= 1".into()));
    }
    let w = Workload::from_content_pmf(&twin.pmf())?;
    Ok((0..horizon as u64)
        .map(|t| w.sample_request(t, n_clients, rng))
        .collect())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const TWIN_MAGIC: &[u8; 8] = b"ECTWIN\0\0";
pub const TWIN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwinCheckpointHeader {
    pub catalogue_size: u64,
    pub version: u64,
    pub creation_step: u64,
}

/// Binary layout, little endian: magic `ECTWIN\0\0`, format `u32`, reserved
/// `u32`, catalogue size `u64`, model version `u64`, creation step `u64`,
/// then one `f64` per content.
pub fn write_twin_checkpoint<W: Write>(mut w: W, twin: &TwinModel, creation_step: u64) -> std::io::Result<()> {
    w.write_all(TWIN_MAGIC)?;
    w.write_all(&TWIN_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&(twin.params.len() as u64).to_le_bytes())?;
    w.write_all(&twin.version.to_le_bytes())?;
    w.write_all(&creation_step.to_le_bytes())?;
    for p in &twin.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_twin_checkpoint<R: Read>(mut r: R) -> Result<(TwinModel, TwinCheckpointHeader)> {
    let fmt = |m: &str| Error::Format(m.to_owned());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated twin header"))?;
    if &magic != TWIN_MAGIC {
        return Err(fmt("not a twin checkpoint"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| fmt("truncated twin header"))?;
    let format = u32::from_le_bytes(b4);
    if format != TWIN_FORMAT_VERSION {
        return Err(Error::Format(format!("twin format {format} unsupported")));
    }
    r.read_exact(&mut b4).map_err(|_| fmt("truncated twin header"))?;
    let mut read_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8).map_err(|_| fmt("truncated twin header"))?;
        Ok(u64::from_le_bytes(b8))
    };
    let catalogue_size = read_u64(&mut r)?;
    let version = read_u64(&mut r)?;
    let creation_step = read_u64(&mut r)?;
    let mut params = Vec::with_capacity(catalogue_size as usize);
    for _ in 0..catalogue_size {
        r.read_exact(&mut b8).map_err(|_| fmt("truncated twin payload"))?;
        params.push(f64::from_le_bytes(b8));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(fmt("trailing bytes after twin payload"));
    }
    Ok((
        TwinModel { params, version },
        TwinCheckpointHeader {
            catalogue_size,
            version,
            creation_step,
        },
    ))
}

pub fn save_twin(path: &Path, twin: &TwinModel, creation_step: u64) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_twin_checkpoint(std::io::BufWriter::new(f), twin, creation_step).map_err(|e| Error::io(path, e))
}

pub fn load_twin(path: &Path) -> Result<(TwinModel, TwinCheckpointHeader)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_twin_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{empirical_distribution, l1_distance, ContentId, Op, RequestStream, WorkloadModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn attrs(distance: f64, backhaul: f64, coverage: f64, request: f64) -> PairAttributes {
        PairAttributes {
            distance,
            backhaul,
            coverage,
            request,
        }
    }

    fn weights(g: f64, k: f64, b: f64, t: f64) -> AffinityConfig {
        AffinityConfig {
            w_distance: g,
            w_backhaul: k,
            w_coverage: b,
            w_request: t,
            normalize: false,
        }
    }

    #[test]
    fn affinity_examples() {
        let v = attribute_affinity(&attrs(2.0, 0.5, 0.3, 0.4), &weights(1.0, 1.0, 1.0, 1.0));
        assert!((v - 1.7).abs() < 1e-12);
        let v = attribute_affinity(&attrs(3.0, 0.2, 0.7, 0.9), &weights(0.0, 0.0, 0.0, 1.0));
        assert!((v - 0.9).abs() < 1e-12);
        let v = attribute_affinity(&attrs(1.0, 1.0, 1.0, 1.0), &weights(1.0, 1.0, 1.0, 1.0));
        assert!((v - 4.0).abs() < 1e-12);
    }

    fn descriptor(x: f64, backhaul: f64, clients: &[usize], pmf: Vec<f64>) -> BsDescriptor {
        BsDescriptor {
            position: [x, 0.0],
            backhaul,
            clients: clients.iter().copied().collect(),
            request_pmf: pmf,
        }
    }

    #[test]
    fn pair_attribute_definitions() {
        let a = descriptor(0.0, 50.0, &[0, 1, 2], vec![0.5, 0.5, 0.0]);
        let b = descriptor(3.0, 100.0, &[2, 3], vec![0.0, 0.5, 0.5]);
        let p = pair_attributes(&a, &b);
        assert_eq!(p.distance, 3.0);
        assert_eq!(p.backhaul, 0.5);
        assert_eq!(p.coverage, 0.25);
        assert!((p.request - 0.5).abs() < 1e-15);
    }

    #[test]
    fn coincident_positions_are_clamped() {
        let a = descriptor(1.0, 1.0, &[0], vec![1.0]);
        let p = pair_attributes(&a, &a.clone());
        assert_eq!(p.distance, MIN_DISTANCE);
        assert!(attribute_affinity(&p, &weights(1.0, 0.0, 0.0, 0.0)).is_finite());
    }

    #[test]
    fn doubling_weights_doubles_affinity() {
        let bss: Vec<_> = (0..4)
            .map(|i| descriptor(100.0 * i as f64 + 7.0 * (i * i) as f64, 10.0 + i as f64, &[i, i + 1], vec![0.25 * i as f64, 1.0 - 0.25 * i as f64]))
            .collect();
        for normalize in [false, true] {
            let cfg = AffinityConfig {
                normalize,
                ..weights(0.3, 0.2, 0.4, 0.1)
            };
            let double = AffinityConfig {
                w_distance: 0.6,
                w_backhaul: 0.4,
                w_coverage: 0.8,
                w_request: 0.2,
                normalize,
            };
            let a = affinity_matrix(&bss, &cfg).unwrap();
            let b = affinity_matrix(&bss, &double).unwrap();
            for i in 0..4 {
                assert_eq!(a.get(i, i), 0.0);
                for j in 0..4 {
                    assert_eq!(a.get(i, j), a.get(j, i));
                    assert!((b.get(i, j) - 2.0 * a.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> AffinityMatrix {
        let mut m = AffinityMatrix::zeros(n);
        for &(i, j, w) in edges {
            m.set(i, j, w).unwrap();
        }
        m
    }

    fn two_triangles() -> AffinityMatrix {
        graph(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (0, 2, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (3, 5, 1.0),
                (2, 3, 1.0),
            ],
        )
    }

    #[test]
    fn path_graph_betweenness() {
        let b = edge_betweenness(&graph(3, &[(0, 1, 1.0), (1, 2, 1.0)])).unwrap();
        assert_eq!(b, vec![((0, 1), 2.0), ((1, 2), 2.0)]);
    }

    #[test]
    fn triangle_betweenness_is_uniform() {
        let b = edge_betweenness(&graph(3, &[(0, 1, 2.0), (1, 2, 2.0), (0, 2, 2.0)])).unwrap();
        assert!(b.iter().all(|&(_, v)| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bridge_has_maximal_betweenness() {
        let b = edge_betweenness(&two_triangles()).unwrap();
        let bridge = b.iter().find(|(e, _)| *e == (2, 3)).unwrap().1;
        // 3 x 3 cross pairs all use the bridge
        assert!((bridge - 9.0).abs() < 1e-12);
        assert!(b.iter().filter(|(e, _)| *e != (2, 3)).all(|&(_, v)| v < bridge));
    }

    #[test]
    fn betweenness_splits_equal_paths() {
        // square 0-1-2-3-0: opposite corners have two shortest paths
        let b = edge_betweenness(&graph(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)])).unwrap();
        assert!(b.iter().all(|&(_, v)| (v - 2.0).abs() < 1e-12), "{b:?}");
    }

    #[test]
    fn betweenness_on_disconnected_graph() {
        let b = edge_betweenness(&graph(4, &[(0, 1, 1.0), (2, 3, 1.0)])).unwrap();
        assert_eq!(b, vec![((0, 1), 1.0), ((2, 3), 1.0)]);
        assert!(edge_betweenness(&AffinityMatrix::zeros(1)).is_err());
    }

    #[test]
    fn dcs_examples() {
        let phi = two_triangles();
        let one = dcs_cluster(&phi, 1).unwrap();
        assert_eq!(one.cluster_of, vec![0; 6]);
        let all = dcs_cluster(&phi, 6).unwrap();
        assert_eq!(all.cluster_of, vec![0, 1, 2, 3, 4, 5]);
        let two = dcs_cluster(&phi, 2).unwrap();
        assert_eq!(two.partition(), vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(dcs_cluster(&phi, 7).is_err());
        assert!(dcs_cluster(&phi, 0).is_err());
    }

    #[test]
    fn dcs_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..8);
            let phi = AffinityMatrix::from_fn(n, |_, _| rng.random_range(0.05..1.0)).unwrap();
            let c = rng.random_range(1..=n.min(4));
            let base = dcs_cluster(&phi, c).unwrap();
            for s in [0.5, 3.0, 1000.0] {
                assert_eq!(dcs_cluster(&phi.scaled(s).unwrap(), c).unwrap(), base);
            }
        }
    }

    fn model(p: &[f64]) -> TwinModel {
        TwinModel::from_params(p.to_vec())
    }

    #[test]
    fn v_twinning_examples() {
        let single = ClusterAssignment {
            cluster_of: vec![0, 0],
        };
        let (c, _) = v_twinning(&[model(&[1.0, 3.0]), model(&[3.0, 5.0])], &single, false).unwrap();
        assert_eq!(c[0].params, vec![2.0, 4.0]);

        let same = vec![model(&[0.3, -1.2]); 4];
        let (_, g) = v_twinning(&same, &ClusterAssignment { cluster_of: vec![0, 1, 1, 0] }, false).unwrap();
        assert_eq!(g.params, vec![0.3, -1.2]);

        // cluster 0 = {0}, cluster 1 = {1, 2, 3}
        let locals = [model(&[4.0, 0.0]), model(&[0.0, 0.0]), model(&[1.0, 3.0]), model(&[2.0, 6.0])];
        let asym = ClusterAssignment {
            cluster_of: vec![0, 1, 1, 1],
        };
        let (c, g) = v_twinning(&locals, &asym, false).unwrap();
        assert_eq!(c[1].params, vec![1.0, 3.0]);
        assert_eq!(g.params, vec![2.5, 1.5]);
        // the flat four-model mean would be [1.75, 2.25]
        assert_ne!(g.params, vec![1.75, 2.25]);
        let (_, gw) = v_twinning(&locals, &asym, true).unwrap();
        assert_eq!(gw.params, vec![1.75, 2.25]);
    }

    #[test]
    fn v_twinning_length_mismatch() {
        let c = ClusterAssignment { cluster_of: vec![0, 0] };
        assert!(matches!(
            v_twinning(&[model(&[1.0]), model(&[1.0, 2.0])], &c, false),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn divergence_examples() {
        assert_eq!(divergence(&model(&[1.0, 2.0]), &model(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(divergence(&model(&[0.0, 0.0]), &model(&[2.0, 0.0])).unwrap(), 2.0);
        assert!(divergence(&model(&[0.0]), &model(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn h_twinning_examples() {
        let c = ClusterAssignment { cluster_of: vec![0] };
        let g = model(&[0.5, 0.5]);
        let out = h_twinning(&[g.clone()], &c, &g, 0.01, None, false).unwrap();
        assert!(!out.updated());
        assert_eq!(out.global, g);

        let out = h_twinning(&[model(&[1.0, 1.0])], &c, &model(&[0.0, 0.0]), 0.01, None, false).unwrap();
        assert_eq!(out.decisions, vec![(0, 1.0, true)]);
        assert_eq!(out.global.params, vec![1.0, 1.0]);

        let out = h_twinning(&[model(&[5.0, -3.0])], &c, &model(&[0.0, 0.0]), 1e18, None, false).unwrap();
        assert!(!out.updated());
    }

    #[test]
    fn h_twinning_respects_arrival_order() {
        let clusters = ClusterAssignment { cluster_of: vec![0, 1] };
        let locals = [model(&[0.0]), model(&[2.0])];
        let g = model(&[0.0]);
        // cluster 0 equals the global, so it never fires first
        let a = h_twinning(&locals, &clusters, &g, 0.5, Some(&[0, 1]), false).unwrap();
        assert_eq!(a.decisions.iter().map(|d| d.2).collect::<Vec<_>>(), vec![false, true]);
        // cluster 1 first fires, then cluster 0 differs from the new mean [1]
        let b = h_twinning(&locals, &clusters, &g, 0.5, Some(&[1, 0]), false).unwrap();
        assert_eq!(b.decisions.iter().map(|d| d.2).collect::<Vec<_>>(), vec![true, true]);
        assert_eq!(b.global.params, vec![1.0]);
    }

    #[test]
    fn aggregator_serializes_submissions() {
        let clusters = ClusterAssignment { cluster_of: vec![0, 1] };
        let (twins, g) = v_twinning(&[model(&[0.0, 0.0]), model(&[0.0, 0.0])], &clusters, false).unwrap();
        let agg = std::sync::Arc::new(HTwinAggregator::new(twins, &clusters, g, &TwinSyncConfig::default()));
        let handles: Vec<_> = (0..2)
            .map(|c| {
                let agg = agg.clone();
                std::thread::spawn(move || agg.submit(c, model(&[2.0, 2.0])).unwrap())
            })
            .collect();
        let fired: Vec<bool> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        // the first submission moves the global to [1, 1]; the second then
        // diverges by 1 and moves it to [2, 2]
        assert_eq!(fired, vec![true, true].into_iter().collect::<Vec<_>>());
        assert_eq!(agg.global().params, vec![2.0, 2.0]);
        assert!(agg.submit(5, model(&[0.0, 0.0])).is_err());
    }

    fn history_of(ids: impl IntoIterator<Item = u32>) -> Vec<RequestEvent> {
        ids.into_iter()
            .enumerate()
            .map(|(t, c)| RequestEvent {
                time: t as u64,
                client: 0,
                content: ContentId(c),
                op: Op::Read,
            })
            .collect()
    }

    #[test]
    fn twin_learns_uniform_history() {
        let hist = history_of((0..4000).map(|i| (i % 20) as u32));
        let prev = TwinModel::from_params((0..20).map(|i| (i as f64) * 0.2).collect());
        let t = train_local_twin(&hist, &prev, &TwinSyncConfig::default()).unwrap();
        assert_eq!(t.version, 1);
        assert!(l1_distance(&t.pmf(), &vec![0.05; 20]) < 0.05);
    }

    #[test]
    fn twin_learns_repeated_content() {
        let hist = history_of(std::iter::repeat_n(7u32, 640));
        let t = train_local_twin(&hist, &TwinModel::blank(100), &TwinSyncConfig::default()).unwrap();
        assert!(t.pmf()[7] > 0.9);
    }

    #[test]
    fn twin_training_needs_history() {
        assert!(matches!(
            train_local_twin(&[], &TwinModel::blank(3), &TwinSyncConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn forecast_examples() {
        let mut params = vec![-50.0; 10];
        params[7] = 50.0;
        let point = TwinModel::from_params(params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ev = forecast_requests(&point, 500, 8, &mut rng).unwrap();
        assert!(ev.iter().all(|e| e.content == ContentId(7) && e.client < 8));
        assert!(forecast_requests(&point, 0, 8, &mut rng).is_err());
    }

    /// History of 2x10^4 zipf(0.8) requests over 100 items. Expected sampling
    /// error of 10^5 forecast draws is ~0.02 in L1, leaving headroom for the
    /// twin's own fit error.
    #[test]
    fn forecast_round_trip_matches_history() {
        let w = Workload::new(WorkloadModel::zipf(0.8, 100, 4)).unwrap();
        let hist: Vec<_> = RequestStream::new(w, 8, 2).take(20_000).collect();
        let twin = train_local_twin(&hist, &TwinModel::blank(100), &TwinSyncConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fc = forecast_requests(&twin, 100_000, 8, &mut rng).unwrap();
        let d = l1_distance(&empirical_distribution(&fc, 100), &empirical_distribution(&hist, 100));
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let twin = TwinModel {
            params: vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0],
            version: 42,
        };
        let mut buf = Vec::new();
        write_twin_checkpoint(&mut buf, &twin, 1234).unwrap();
        assert_eq!(buf.len(), 40 + 5 * 8);
        let (back, header) = read_twin_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(header.creation_step, 1234);
        assert_eq!(header.catalogue_size, 5);
        assert_eq!(back.version, 42);
        let bits = |m: &TwinModel| m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&twin));
        assert!(read_twin_checkpoint(&buf[..buf.len() - 1]).is_err());
        assert!(read_twin_checkpoint(&b"garbage!garbage!"[..]).is_err());
    }

    proptest! {
        #[test]
        fn v_twinning_is_permutation_invariant_and_convex(
            vals in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 2..7),
            seed in 0u64..1000,
        ) {
            let n = vals.len();
            let locals: Vec<TwinModel> = vals.iter().map(|v| model(v)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.random_range(1..=n);
            let mut cluster_of: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
            cluster_of.sort_unstable();
            let clusters = ClusterAssignment { cluster_of };
            let (twins, _) = v_twinning(&locals, &clusters, false).unwrap();
            // permute models within each cluster
            let mut permuted = locals.clone();
            for k in 0..c {
                let m = clusters.members(k);
                let mut shuffled = m.clone();
                rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
                for (a, b) in m.iter().zip(&shuffled) {
                    permuted[*a] = locals[*b].clone();
                }
            }
            let (twins2, _) = v_twinning(&permuted, &clusters, false).unwrap();
            for (a, b) in twins.iter().zip(&twins2) {
                for (x, y) in a.params.iter().zip(&b.params) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
            for (k, twin) in twins.iter().enumerate() {
                for d in 0..3 {
                    let col: Vec<f64> = clusters.members(k).iter().map(|&i| locals[i].params[d]).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(twin.params[d] >= lo - 1e-12 && twin.params[d] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn h_twinning_fires_on_any_difference_at_zero_threshold(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            prop_assume!(a != b);
            let c = ClusterAssignment { cluster_of: vec![0] };
            let out = h_twinning(&[model(&a)], &c, &model(&b), 0.0, None, false).unwrap();
            prop_assert!(out.updated());
        }
    }
}
