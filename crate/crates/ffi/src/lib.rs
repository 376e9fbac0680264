//! C ABI for edgecache.
//!
//! Every function returns an [`EcStatus`]; on failure the message is kept
//! per thread and read with [`ec_last_error_message`]. Handles are opaque
//! and owned by the caller until passed to the matching `_free`. Buffers are
//! caller-allocated; a buffer shorter than required fails with
//! `EC_STATUS_BUFFER_TOO_SMALL` and nothing is written.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use edgecache::agent::StateEncoder;
use edgecache::experiment::{allowed_actions, main_env, run_experiment, seed_twins, state_encoder, ExperimentConfig};
use edgecache::netmodel::{Action, CacheEnv, Observation};
use edgecache::reliability::extend_state;
use edgecache::twin::{load_twin, save_twin, TwinModel};
use edgecache::workload::{Distribution, Op, RequestEvent, RequestStream, Workload, WorkloadModel};
use edgecache::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Config = 4,
    Domain = 5,
    Contract = 6,
    Divergence = 7,
    Io = 8,
    Format = 9,
    /// The request budget is spent; no decision is pending.
    Exhausted = 10,
    Panic = 11,
    Internal = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EcRequest {
    pub time: u64,
    pub client: u64,
    pub content: u32,
    /// 0 read, 1 write.
    pub op: u8,
}

/// A pending decision.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EcObservation {
    pub request: EcRequest,
    pub serving_bs: u64,
    /// -1 when the content is not cached on the serving BS.
    pub last_cached: i64,
    pub frequency: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EcStepResult {
    pub reward: f64,
    pub penalty: f64,
    pub hits: u64,
    /// The action changed a cache slot.
    pub accepted: bool,
    /// No further decision in this episode.
    pub done: bool,
}

pub struct EcWorkload {
    stream: RequestStream,
}

pub struct EcEnv {
    env: CacheEnv,
    base: StateEncoder,
    extended: StateEncoder,
}

pub struct EcTwin {
    model: TwinModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => EcStatus::Config,
            Error::Domain(_) => EcStatus::Domain,
            Error::Contract(_) | Error::BufferUnderfull { .. } | Error::Aggregation(_) => EcStatus::Contract,
            Error::Divergence(_) => EcStatus::Divergence,
            Error::Io { .. } => EcStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) => EcStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: EcStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            EcStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: non-null handles come from the matching constructor and are
    // not shared across threads by contract.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(EcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: caller passes a writable location or null.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(EcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize) -> Result<&'a mut [T], Failure> {
    if len < needed {
        return fail(EcStatus::BufferTooSmall, format!("buffer holds {len}, {needed} needed"));
    }
    if p.is_null() {
        return fail(EcStatus::NullPointer, "buffer is null");
    }
    // SAFETY: caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, needed) })
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<Option<String>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(|s| Some(s.to_owned()))
        .map_err(|_| Failure(EcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn required_path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    match unsafe { string_arg(p, what)? } {
        Some(s) => Ok(PathBuf::from(s)),
        None => fail(EcStatus::NullPointer, format!("{what} is null")),
    }
}

/// NULL config text means the shipped defaults.
unsafe fn config_arg(toml: *const c_char) -> Result<ExperimentConfig, Failure> {
    let cfg = match unsafe { string_arg(toml, "config")? } {
        Some(text) => ExperimentConfig::from_toml_str(&text)?,
        None => ExperimentConfig::shipped_defaults(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn request(ev: &RequestEvent) -> EcRequest {
    EcRequest {
        time: ev.time,
        client: ev.client as u64,
        content: ev.content.0,
        op: match ev.op {
            Op::Read => 0,
            Op::Write => 1,
        },
    }
}

fn observation(obs: &Observation) -> EcObservation {
    EcObservation {
        request: request(&obs.event),
        serving_bs: obs.serving_bs as u64,
        last_cached: obs.state.last_cached.map_or(-1, |t| t as i64),
        frequency: obs.state.frequency,
    }
}

/// Library version, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn ec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

// ---- workload ----

/// Zipf request stream over `catalogue` contents.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_workload_new_zipf(
    shape: f64,
    catalogue: usize,
    model_seed: u64,
    stream_seed: u64,
    n_clients: usize,
    out: *mut *mut EcWorkload,
) -> EcStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let model = WorkloadModel {
            distribution: Distribution::Zipf { shape },
            catalogue_size: catalogue,
            seed: model_seed,
        };
        new_workload(model, n_clients, stream_seed, out)
    })
}

/// Request stream with content `i` drawn proportionally to `weights[i]`.
///
/// # Safety
/// `weights` must hold `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_workload_new_weighted(
    weights: *const f64,
    n: usize,
    stream_seed: u64,
    n_clients: usize,
    out: *mut *mut EcWorkload,
) -> EcStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        if weights.is_null() {
            return fail(EcStatus::NullPointer, "weights is null");
        }
        // SAFETY: caller guarantees `n` readable elements.
        let w = unsafe { std::slice::from_raw_parts(weights, n) }.to_vec();
        let model = WorkloadModel {
            distribution: Distribution::Custom { weights: w },
            catalogue_size: n,
            seed: 0,
        };
        new_workload(model, n_clients, stream_seed, out)
    })
}

fn new_workload(model: WorkloadModel, n_clients: usize, seed: u64, out: &mut *mut EcWorkload) -> Result<(), Failure> {
    if n_clients == 0 {
        return fail(EcStatus::InvalidArgument, "n_clients must be >= 1");
    }
    let w = Workload::new(model)?;
    *out = Box::into_raw(Box::new(EcWorkload {
        stream: RequestStream::new(w, n_clients, seed),
    }));
    Ok(())
}

/// Next request of the stream.
///
/// # Safety
/// `h` must come from an `ec_workload_new_*` call; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_workload_next(h: *mut EcWorkload, out: *mut EcRequest) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "workload")? };
        let out = unsafe { out_ptr(out, "out")? };
        let ev = h.stream.next().ok_or_else(|| Failure(EcStatus::Internal, "stream ended".into()))?;
        *out = request(&ev);
        Ok(())
    })
}

/// Catalogue size of the stream's workload.
///
/// # Safety
/// `h` must come from an `ec_workload_new_*` call.
#[no_mangle]
pub unsafe extern "C" fn ec_workload_catalogue(h: *const EcWorkload) -> usize {
    // SAFETY: see above.
    unsafe { h.as_ref() }.map_or(0, |h| h.stream.workload().catalogue_size())
}

/// Per-content request probabilities; `len` must be at least the catalogue
/// size.
///
/// # Safety
/// `h` must be a live workload; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_workload_pmf(h: *mut EcWorkload, buf: *mut f64, len: usize) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "workload")? };
        let pmf = h.stream.workload().content_pmf();
        unsafe { out_slice(buf, len, pmf.len())? }.copy_from_slice(&pmf);
        Ok(())
    })
}

/// # Safety
/// `h` must come from an `ec_workload_new_*` call or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_workload_free(h: *mut EcWorkload) {
    if !h.is_null() {
        // SAFETY: allocated by Box::into_raw in new_workload.
        drop(unsafe { Box::from_raw(h) });
    }
}

// ---- environment ----

/// Main-run environment for `seed` under a TOML experiment config (NULL for
/// the defaults). Drive it with `ec_env_advance` / `ec_env_step`.
///
/// # Safety
/// `config_toml` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_env_new(config_toml: *const c_char, seed: u64, out: *mut *mut EcEnv) -> EcStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let cfg = unsafe { config_arg(config_toml)? };
        let env = main_env(&cfg, seed)?;
        *out = Box::into_raw(Box::new(EcEnv {
            env,
            base: state_encoder(&cfg, false),
            extended: state_encoder(&cfg, true),
        }));
        Ok(())
    })
}

/// Size of the action space, skip included.
///
/// # Safety
/// `h` must be a live environment or NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_env_n_actions(h: *const EcEnv) -> usize {
    // SAFETY: see above.
    unsafe { h.as_ref() }.map_or(0, |h| h.env.network().config().n_actions())
}

/// Length of the encoded state, base or extended.
///
/// # Safety
/// `h` must be a live environment or NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_env_state_dim(h: *const EcEnv, extended: bool) -> usize {
    // SAFETY: see above.
    unsafe { h.as_ref() }.map_or(0, |h| if extended { h.extended.dim() } else { h.base.dim() })
}

/// Number of BSs.
///
/// # Safety
/// `h` must be a live environment or NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_env_n_bs(h: *const EcEnv) -> usize {
    // SAFETY: see above.
    unsafe { h.as_ref() }.map_or(0, |h| h.env.network().n_bs())
}

/// Serves requests up to the next decision and describes it. Returns
/// `EC_STATUS_EXHAUSTED` when the budget is spent.
///
/// # Safety
/// `h` must be a live environment; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_env_advance(h: *mut EcEnv, out: *mut EcObservation) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let out = unsafe { out_ptr(out, "out")? };
        match h.env.advance()? {
            Some(obs) => {
                *out = observation(obs);
                Ok(())
            }
            None => fail(EcStatus::Exhausted, "request budget exhausted"),
        }
    })
}

fn pending(h: &EcEnv) -> Result<&Observation, Failure> {
    h.env
        .pending()
        .ok_or_else(|| Failure(EcStatus::Contract, "no pending decision; call ec_env_advance".into()))
}

/// Feature vector of the pending decision.
///
/// # Safety
/// `h` must be a live environment; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_env_encode(h: *mut EcEnv, extended: bool, buf: *mut f64, len: usize) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let obs = pending(h)?;
        let v = if extended {
            let s = extend_state(obs.state.clone(), obs.event.client, &obs.loads, true);
            h.extended.encode(&s)
        } else {
            h.base.encode(&obs.state)
        };
        unsafe { out_slice(buf, len, v.len())? }.copy_from_slice(&v);
        Ok(())
    })
}

/// 1 for each action that can take effect at the pending decision: skip and
/// the slots of BSs covering the requesting client.
///
/// # Safety
/// `h` must be a live environment; `mask` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ec_env_allowed_actions(h: *mut EcEnv, mask: *mut u8, len: usize) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let client = pending(h)?.event.client;
        let allowed = allowed_actions(h.env.network(), client)?;
        let out = unsafe { out_slice(mask, len, allowed.len())? };
        for (o, a) in out.iter_mut().zip(allowed) {
            *o = u8::from(a);
        }
        Ok(())
    })
}

/// Normalized per-BS loads.
///
/// # Safety
/// `h` must be a live environment; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_env_loads(h: *mut EcEnv, buf: *mut f64, len: usize) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let loads = h.env.network().loads();
        unsafe { out_slice(buf, len, loads.len())? }.copy_from_slice(&loads);
        Ok(())
    })
}

/// Applies `action` to the pending decision and runs to the next one.
///
/// # Safety
/// `h` must be a live environment; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_env_step(h: *mut EcEnv, action: usize, out: *mut EcStepResult) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let out = unsafe { out_ptr(out, "out")? };
        pending(h)?;
        let o = h.env.step(Action(action))?;
        *out = EcStepResult {
            reward: o.reward,
            penalty: o.penalty,
            hits: o.hits,
            accepted: o.effect.accepted(),
            done: o.done(),
        };
        Ok(())
    })
}

/// Hits and requests served so far.
///
/// # Safety
/// `h` must be a live environment; `hits` and `requests` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_env_counters(h: *mut EcEnv, hits: *mut u64, requests: *mut u64) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let c = h.env.network().counter();
        *unsafe { out_ptr(hits, "hits")? } = c.hits;
        *unsafe { out_ptr(requests, "requests")? } = c.requests;
        Ok(())
    })
}

/// Writes a resumable JSON snapshot of the environment.
///
/// # Safety
/// `h` must be a live environment; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ec_env_save(h: *mut EcEnv, path: *const c_char) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let path = unsafe { required_path(path, "path")? };
        h.env.save_snapshot(&path)?;
        Ok(())
    })
}

/// Replaces the environment's state with a snapshot written by
/// `ec_env_save` under the same config.
///
/// # Safety
/// `h` must be a live environment; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ec_env_restore(h: *mut EcEnv, path: *const c_char) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "env")? };
        let path = unsafe { required_path(path, "path")? };
        let env = CacheEnv::load_snapshot(&path)?;
        if env.network().config() != h.env.network().config() {
            return fail(EcStatus::Config, "snapshot was taken under a different network config");
        }
        h.env = env;
        Ok(())
    })
}

/// # Safety
/// `h` must come from `ec_env_new` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_env_free(h: *mut EcEnv) {
    if !h.is_null() {
        // SAFETY: allocated by Box::into_raw in ec_env_new.
        drop(unsafe { Box::from_raw(h) });
    }
}

// ---- twins ----

/// Global twin bootstrapped from the history of `seed`.
///
/// # Safety
/// `config_toml` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_twin_train(config_toml: *const c_char, seed: u64, out: *mut *mut EcTwin) -> EcStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let cfg = unsafe { config_arg(config_toml)? };
        let ts = seed_twins(&cfg, seed)?;
        *out = Box::into_raw(Box::new(EcTwin { model: ts.global }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ec_twin_load(path: *const c_char, out: *mut *mut EcTwin) -> EcStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let path = unsafe { required_path(path, "path")? };
        let (model, _) = load_twin(&path)?;
        *out = Box::into_raw(Box::new(EcTwin { model }));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live twin; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ec_twin_save(h: *mut EcTwin, path: *const c_char, creation_step: u64) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "twin")? };
        let path = unsafe { required_path(path, "path")? };
        save_twin(&path, &h.model, creation_step)?;
        Ok(())
    })
}

/// Catalogue size the twin models.
///
/// # Safety
/// `h` must be a live twin or NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_twin_catalogue(h: *const EcTwin) -> usize {
    // SAFETY: see above.
    unsafe { h.as_ref() }.map_or(0, |h| h.model.params.len())
}

/// The twin's forecast request distribution.
///
/// # Safety
/// `h` must be a live twin; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ec_twin_pmf(h: *mut EcTwin, buf: *mut f64, len: usize) -> EcStatus {
    guard(|| {
        let h = unsafe { handle(h, "twin")? };
        let pmf = h.model.pmf();
        unsafe { out_slice(buf, len, pmf.len())? }.copy_from_slice(&pmf);
        Ok(())
    })
}

/// # Safety
/// `h` must come from `ec_twin_train` / `ec_twin_load` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ec_twin_free(h: *mut EcTwin) {
    if !h.is_null() {
        // SAFETY: allocated by Box::into_raw.
        drop(unsafe { Box::from_raw(h) });
    }
}

// ---- experiments ----

/// Runs every seed of the config, writing outputs to `out_dir` when it is
/// not NULL, and reports the seed-mean final hit rate.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `final_hit_rate` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ec_run_experiment(
    config_toml: *const c_char,
    out_dir: *const c_char,
    final_hit_rate: *mut f64,
) -> EcStatus {
    guard(|| {
        let result = unsafe { out_ptr(final_hit_rate, "final_hit_rate")? };
        let mut cfg = unsafe { config_arg(config_toml)? };
        if let Some(dir) = unsafe { string_arg(out_dir, "out_dir")? } {
            cfg.run.out_dir = Some(PathBuf::from(dir));
        }
        let out = run_experiment(&cfg)?;
        *result = out.mean_of(|s| s.final_hit_rate);
        Ok(())
    })
}
