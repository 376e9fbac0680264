//! Load-aware interventions around the agent/environment loop: state
//! extension, overload-triggered action mutation, and reward shaping by
//! load imbalance.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{Action, CmdpState, Network, StateExtension};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReliabilityConfig {
    pub enable_state: bool,
    pub enable_action: bool,
    pub enable_reward: bool,
    /// Overload threshold on `load(target) - min load`.
    pub threshold: f64,
    /// Probability that an overloading action is replaced.
    pub p_mute: f64,
    /// Weight of the imbalance penalty.
    pub phi: f64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            enable_state: false,
            enable_action: false,
            enable_reward: false,
            threshold: 0.2,
            p_mute: 1.0,
            phi: 1.0,
        }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("reliability.threshold", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.p_mute) {
            return Err(Error::config("reliability.p_mute", "must lie in [0, 1]"));
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return Err(Error::config("reliability.phi", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Adds the requesting client and the per-BS loads to the state when
/// `enabled`; otherwise returns it unchanged.
pub fn extend_state(base: CmdpState, client: usize, loads: &[f64], enabled: bool) -> CmdpState {
    if !enabled {
        return base;
    }
    CmdpState {
        extension: Some(StateExtension {
            client,
            loads: loads.to_vec(),
        }),
        ..base
    }
}

fn min_load(loads: &[f64]) -> f64 {
    loads.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `loads[n] - min(loads) >= threshold`.
pub fn is_overloaded(loads: &[f64], n: usize, threshold: f64) -> Result<bool> {
    let l = loads
        .get(n)
        .ok_or_else(|| Error::domain(format!("BS {n} outside [0, {})", loads.len())))?;
    Ok(l - min_load(loads) >= threshold)
}

/// `r - |(phi / N) sum_n (loads[n] - min(loads))|`.
pub fn shape_reward(r: f64, loads: &[f64], phi: f64, n_bs: usize) -> f64 {
    let m = min_load(loads);
    let spread: f64 = loads.iter().map(|l| l - m).sum();
    r - (phi / n_bs as f64 * spread).abs()
}

/// Backup placement for a request from `client`: the least loaded covering
/// BS (ties to the lowest index), at its first empty slot or else its least
/// recently used slot.
pub fn backup_action(net: &Network, client: usize, loads: &[f64]) -> Result<Action> {
    let mut best: Option<usize> = None;
    for &bs in net.coverage(client)? {
        if best.is_none_or(|b| loads[bs] < loads[b]) {
            best = Some(bs);
        }
    }
    let bs = best.expect("coverage sets are non-empty");
    let unit = net.unit(bs);
    let slot = unit
        .first_empty()
        .or_else(|| unit.lru_slot())
        .expect("a cache unit has at least one slot");
    Ok(Action::slot(bs, slot, net.cap()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub step: u64,
    pub original_action: usize,
    pub final_action: usize,
    pub mutated: bool,
    pub target_load: f64,
    pub min_load: f64,
}

/// Every step at which the overload gate fired, mutated or not.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionLog {
    pub mutation_count: u64,
    pub records: Vec<InterventionRecord>,
}

impl InterventionLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{other:?}")),
        })?;
        w.write_record(["step", "original_action", "final_action", "mutated", "target_load", "min_load"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.original_action.to_string(),
                r.final_action.to_string(),
                u8::from(r.mutated).to_string(),
                r.target_load.to_string(),
                r.min_load.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Replaces `a` by the backup placement with probability `p_mute` when its
/// target BS is overloaded. Skips, disabled modules and non-overloading
/// actions pass through. The RNG is only drawn from when the gate fires
/// and `0 < p_mute < 1`.
#[allow(clippy::too_many_arguments)]
pub fn intervene_action<R: Rng + ?Sized>(
    a: Action,
    client: usize,
    loads: &[f64],
    net: &Network,
    cfg: &ReliabilityConfig,
    step: u64,
    rng: &mut R,
    log: &mut InterventionLog,
) -> Result<(Action, bool)> {
    if !cfg.enable_action {
        return Ok((a, false));
    }
    let Some((bs, _)) = a.target(net.cap()) else {
        return Ok((a, false));
    };
    if !is_overloaded(loads, bs, cfg.threshold)? {
        return Ok((a, false));
    }
    let fire = if cfg.p_mute >= 1.0 {
        true
    } else if cfg.p_mute <= 0.0 {
        false
    } else {
        rng.random_bool(cfg.p_mute)
    };
    let out = if fire { backup_action(net, client, loads)? } else { a };
    let mutated = out != a;
    if mutated {
        log.mutation_count += 1;
    }
    log.records.push(InterventionRecord {
        step,
        original_action: a.0,
        final_action: out.0,
        mutated,
        target_load: loads[bs],
        min_load: min_load(loads),
    });
    Ok((out, mutated))
}
