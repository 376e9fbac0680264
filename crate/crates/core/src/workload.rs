//! Request workloads: parameterized popularity models over a content
//! catalogue, seeded request streams, and memcached-style trace replay.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Discrete, DiscreteCDF, Normal, Poisson};

use crate::error::{Error, Result};

/// Index of an item in the fixed content catalogue `[0, N_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContentId(pub u32);

impl ContentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Read,
    Write,
}

/// A client request for one content item at a discrete time slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub time: u64,
    pub client: usize,
    pub content: ContentId,
    pub op: Op,
}

/// Popularity law over content ranks `1..=N_c`.
///
/// Normal and Poisson laws live on the rank axis: a draw is rounded and
/// clamped into `[1, N_c]`, so tail mass accumulates on the end ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Zipf { shape: f64 },
    Normal { mean: f64, std_dev: f64 },
    Uniform,
    Poisson { rate: f64 },
    /// Explicit (unnormalized) weights per content id; no rank permutation.
    Custom { weights: Vec<f64> },
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution::Zipf { shape: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadModel {
    #[serde(flatten)]
    pub distribution: Distribution,
    pub catalogue_size: usize,
    /// Seeds the rank-to-content permutation.
    #[serde(default)]
    pub seed: u64,
}

impl Default for WorkloadModel {
    fn default() -> Self {
        WorkloadModel {
            distribution: Distribution::default(),
            catalogue_size: 500,
            seed: 0,
        }
    }
}

/// `P(X = k)` for a Zipf law of shape `p` over `n_c` ranks.
pub fn zipf_pmf(k: usize, p: f64, n_c: usize) -> Result<f64> {
    if n_c == 0 {
        return Err(Error::domain("catalogue size must be at least 1"));
    }
    if k == 0 || k > n_c {
        return Err(Error::domain(format!("rank {k} outside [1, {n_c}]")));
    }
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::domain(format!("zipf shape must be > 0, got {p}")));
    }
    Ok((k as f64).powf(-p) / harmonic(p, n_c))
}

fn harmonic(p: f64, n_c: usize) -> f64 {
    // Smallest terms first keeps the sum accurate for long catalogues.
    (1..=n_c).rev().map(|n| (n as f64).powf(-p)).sum()
}

impl WorkloadModel {
    pub fn zipf(shape: f64, catalogue_size: usize, seed: u64) -> Self {
        WorkloadModel {
            distribution: Distribution::Zipf { shape },
            catalogue_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.catalogue_size == 0 {
            return Err(Error::config("workload.catalogue_size", "must be >= 1"));
        }
        match &self.distribution {
            Distribution::Custom { weights } => {
                if weights.len() != self.catalogue_size {
                    Err(Error::config("workload.weights", "need one weight per content"))
                } else if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    Err(Error::config("workload.weights", "weights must be finite and >= 0"))
                } else {
                    Ok(())
                }
            }
            &Distribution::Zipf { shape } if !(shape > 0.0 && shape.is_finite()) => {
                Err(Error::config("workload.shape", "zipf shape must be > 0"))
            }
            &Distribution::Normal { mean, std_dev }
                if !(std_dev > 0.0 && std_dev.is_finite() && mean.is_finite()) =>
            {
                Err(Error::config("workload.std_dev", "must be finite and > 0"))
            }
            &Distribution::Poisson { rate } if !(rate > 0.0 && rate.is_finite()) => {
                Err(Error::config("workload.rate", "poisson rate must be > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Probability of each rank; index 0 holds rank 1.
    pub fn rank_pmf(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.catalogue_size;
        let mut pmf = match self.distribution {
            Distribution::Custom { ref weights } => weights.clone(),
            Distribution::Zipf { shape } => {
                let z = harmonic(shape, n);
                (1..=n).map(|k| (k as f64).powf(-shape) / z).collect::<Vec<_>>()
            }
            Distribution::Uniform => vec![1.0 / n as f64; n],
            Distribution::Normal { mean, std_dev } => {
                let normal = Normal::new(mean, std_dev)
                    .map_err(|e| Error::config("workload.std_dev", e.to_string()))?;
                // round(X) = k  <=>  X in [k - 0.5, k + 0.5)
                (1..=n)
                    .map(|k| {
                        let lo = if k == 1 { 0.0 } else { normal.cdf(k as f64 - 0.5) };
                        let hi = if k == n { 1.0 } else { normal.cdf(k as f64 + 0.5) };
                        (hi - lo).max(0.0)
                    })
                    .collect()
            }
            Distribution::Poisson { rate } => {
                let poisson = Poisson::new(rate)
                    .map_err(|e| Error::config("workload.rate", e.to_string()))?;
                (1..=n)
                    .map(|k| {
                        if n == 1 {
                            1.0
                        } else if k == 1 {
                            poisson.cdf(1)
                        } else if k == n {
                            poisson.sf(n as u64 - 1)
                        } else {
                            poisson.pmf(k as u64)
                        }
                    })
                    .collect()
            }
        };
        let total: f64 = pmf.iter().sum();
        if !(total > 0.0) {
            return Err(Error::domain("popularity law has no mass on the catalogue"));
        }
        pmf.iter_mut().for_each(|p| *p /= total);
        Ok(pmf)
    }
}

/// A validated model with its sampling tables precomputed.
#[derive(Clone, Debug)]
pub struct Workload {
    model: WorkloadModel,
    rank_pmf: Vec<f64>,
    cdf: Vec<f64>,
    rank_to_content: Vec<ContentId>,
}

impl Workload {
    pub fn new(model: WorkloadModel) -> Result<Self> {
        let rank_pmf = model.rank_pmf()?;
        let cdf = cumulative(&rank_pmf);
        let mut rank_to_content: Vec<ContentId> =
            (0..model.catalogue_size as u32).map(ContentId).collect();
        if !matches!(model.distribution, Distribution::Custom { .. }) {
            let mut perm_rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x9e37_79b9_7f4a_7c15);
            rank_to_content.shuffle(&mut perm_rng);
        }
        Ok(Workload {
            model,
            rank_pmf,
            cdf,
            rank_to_content,
        })
    }

    /// A workload whose content pmf is given directly (rank order is the
    /// identity permutation).
    pub fn from_content_pmf(pmf: &[f64]) -> Result<Self> {
        Workload::new(WorkloadModel {
            distribution: Distribution::Custom {
                weights: pmf.to_vec(),
            },
            catalogue_size: pmf.len(),
            seed: 0,
        })
    }

    pub fn model(&self) -> &WorkloadModel {
        &self.model
    }

    pub fn catalogue_size(&self) -> usize {
        self.rank_pmf.len()
    }

    pub fn rank_pmf(&self) -> &[f64] {
        &self.rank_pmf
    }

    pub fn content_of_rank(&self, rank: usize) -> ContentId {
        self.rank_to_content[rank - 1]
    }

    /// Probability of each content id.
    pub fn content_pmf(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.catalogue_size()];
        for (r, &c) in self.rank_to_content.iter().enumerate() {
            out[c.index()] = self.rank_pmf[r];
        }
        out
    }

    fn sample_rank_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }

    pub fn sample_content<R: Rng + ?Sized>(&self, rng: &mut R) -> ContentId {
        self.rank_to_content[self.sample_rank_index(rng)]
    }

    /// Draws one read request at slot `t` from a client chosen uniformly.
    pub fn sample_request<R: Rng + ?Sized>(
        &self,
        t: u64,
        n_clients: usize,
        rng: &mut R,
    ) -> RequestEvent {
        let content = self.sample_content(rng);
        let client = if n_clients > 1 {
            rng.random_range(0..n_clients)
        } else {
            0
        };
        RequestEvent {
            time: t,
            client,
            content,
            op: Op::Read,
        }
    }
}

fn cumulative(pmf: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = pmf
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

/// An endless seeded request stream over a workload.
#[derive(Clone, Debug)]
pub struct RequestStream {
    workload: Workload,
    rng: ChaCha8Rng,
    next_time: u64,
    n_clients: usize,
}

/// Serializable position of a [`RequestStream`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub model: WorkloadModel,
    pub rng: ChaCha8Rng,
    pub next_time: u64,
    pub n_clients: usize,
}

impl RequestStream {
    pub fn new(workload: Workload, n_clients: usize, seed: u64) -> Self {
        RequestStream {
            workload,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_time: 0,
            n_clients,
        }
    }

    pub fn workload(&self) -> &Workload {
        &self.workload
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            model: self.workload.model.clone(),
            rng: self.rng.clone(),
            next_time: self.next_time,
            n_clients: self.n_clients,
        }
    }

    pub fn from_state(state: StreamState) -> Result<Self> {
        Ok(RequestStream {
            workload: Workload::new(state.model)?,
            rng: state.rng,
            next_time: state.next_time,
            n_clients: state.n_clients,
        })
    }
}

impl Iterator for RequestStream {
    type Item = RequestEvent;

    fn next(&mut self) -> Option<RequestEvent> {
        let ev = self
            .workload
            .sample_request(self.next_time, self.n_clients, &mut self.rng);
        self.next_time += 1;
        Some(ev)
    }
}

/// Normalized request counts per content id. Empty input yields the uniform
/// vector; ids outside the catalogue are not counted.
pub fn empirical_distribution<'a, I>(events: I, n_c: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a RequestEvent>,
{
    let mut counts = vec![0u64; n_c];
    let mut total = 0u64;
    for ev in events {
        if let Some(c) = counts.get_mut(ev.content.index()) {
            *c += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![1.0 / n_c as f64; n_c];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// L1 distance between two equal-length vectors.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

// ---------------------------------------------------------------------------
// Trace replay
// ---------------------------------------------------------------------------

/// First-seen assignment of trace keys to content ids, bounded by a cap.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ContentDictionary {
    ids: HashMap<String, ContentId>,
    cap: usize,
}

impl ContentDictionary {
    pub fn new(cap: usize) -> Self {
        ContentDictionary {
            ids: HashMap::new(),
            cap,
        }
    }

    /// Id for `key`, assigning the next free id on first sight. `None` once
    /// the catalogue cap is reached.
    pub fn resolve(&mut self, key: &str) -> Option<ContentId> {
        if let Some(&id) = self.ids.get(key) {
            return Some(id);
        }
        if self.ids.len() >= self.cap {
            return None;
        }
        let id = ContentId(self.ids.len() as u32);
        self.ids.insert(key.to_owned(), id);
        Some(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRowError {
    /// 1-based line number in the file, header included.
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for TraceRowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStats {
    pub rows: u64,
    pub events: u64,
    pub gets: u64,
    pub sets: u64,
    pub deletes: u64,
    pub bytes: u64,
    pub parse_errors: u64,
    /// Parseable rows whose key did not fit under the catalogue cap.
    pub overflow_dropped: u64,
}

#[derive(Clone, Debug)]
pub struct TraceOptions {
    pub catalogue_cap: usize,
    pub n_clients: usize,
    /// Seeds the client assignment; traces carry no client column.
    pub seed: u64,
}

/// Streaming reader over a `timestamp,key,op,size` CSV trace.
pub struct TraceReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    dict: ContentDictionary,
    rng: ChaCha8Rng,
    n_clients: usize,
    stats: TraceStats,
    next_time: u64,
}

/// Opens a trace file, decompressing when the name ends in `.gz`.
pub fn open_trace(path: &Path, opts: &TraceOptions) -> Result<TraceReader<Box<dyn Read>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let inner: Box<dyn Read> = if gz {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    TraceReader::new(inner, opts)
}

impl<R: Read> TraceReader<R> {
    pub fn new(reader: R, opts: &TraceOptions) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["timestamp", "key", "op", "size"];
        if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Format(format!(
                "trace header must be `timestamp,key,op,size`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        Ok(TraceReader {
            records: rdr.into_records(),
            dict: ContentDictionary::new(opts.catalogue_cap),
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            n_clients: opts.n_clients.max(1),
            stats: TraceStats::default(),
            next_time: 0,
        })
    }

    pub fn stats(&self) -> &TraceStats {
        &self.stats
    }

    pub fn dictionary(&self) -> &ContentDictionary {
        &self.dict
    }

    fn parse(&mut self, rec: &csv::StringRecord) -> std::result::Result<Option<RequestEvent>, String> {
        if rec.len() != 4 {
            return Err(format!("expected 4 fields, found {}", rec.len()));
        }
        rec[0]
            .parse::<u64>()
            .map_err(|_| format!("bad timestamp `{}`", &rec[0]))?;
        let key = &rec[1];
        if key.is_empty() {
            return Err("empty key".into());
        }
        let op = match &rec[2] {
            "get" => Op::Read,
            "set" | "delete" => Op::Write,
            other => return Err(format!("unknown op `{other}`")),
        };
        let size = rec[3]
            .parse::<u64>()
            .map_err(|_| format!("bad size `{}`", &rec[3]))?;
        match &rec[2] {
            "get" => self.stats.gets += 1,
            "set" => self.stats.sets += 1,
            _ => self.stats.deletes += 1,
        }
        self.stats.bytes += size;
        let Some(content) = self.dict.resolve(key) else {
            self.stats.overflow_dropped += 1;
            return Ok(None);
        };
        let client = self.rng.random_range(0..self.n_clients);
        let ev = RequestEvent {
            time: self.next_time,
            client,
            content,
            op,
        };
        self.next_time += 1;
        Ok(Some(ev))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = std::result::Result<RequestEvent, TraceRowError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let rec = match self.records.next()? {
                Ok(rec) => rec,
                Err(e) => {
                    self.stats.rows += 1;
                    self.stats.parse_errors += 1;
                    let line = e.position().map_or(0, |p| p.line());
                    return Some(Err(TraceRowError {
                        line,
                        message: e.to_string(),
                    }));
                }
            };
            self.stats.rows += 1;
            let line = rec.position().map_or(0, |p| p.line());
            match self.parse(&rec) {
                Ok(Some(ev)) => {
                    self.stats.events += 1;
                    return Some(Ok(ev));
                }
                Ok(None) => continue,
                Err(message) => {
                    self.stats.parse_errors += 1;
                    return Some(Err(TraceRowError { line, message }));
                }
            }
        }
    }
}

/// A fully loaded trace.
#[derive(Clone, Debug)]
pub struct LoadedTrace {
    pub path: PathBuf,
    pub events: Vec<RequestEvent>,
    pub errors: Vec<TraceRowError>,
    pub stats: TraceStats,
    pub catalogue_size: usize,
}

/// Reads a whole trace, keeping good rows in file order and collecting
/// row-level errors.
pub fn load_trace(path: &Path, opts: &TraceOptions) -> Result<LoadedTrace> {
    let mut reader = open_trace(path, opts)?;
    let mut events = Vec::new();
    let mut errors = Vec::new();
    for item in reader.by_ref() {
        match item {
            Ok(ev) => events.push(ev),
            Err(e) => {
                log::warn!("{}: {}", path.display(), e);
                errors.push(e);
            }
        }
    }
    Ok(LoadedTrace {
        path: path.to_path_buf(),
        events,
        errors,
        stats: reader.stats.clone(),
        catalogue_size: reader.dict.len().max(1),
    })
}
