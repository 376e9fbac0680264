//! Classical replacement policies and the DQN variants they are compared
//! against.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{Action, CacheUnit, PopularityWindow};
use crate::workload::RequestEvent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Lru,
    Lfu,
    Mfu,
    /// DQN without intervention modules or twin pre-training.
    BasicDqn,
    /// DQN with the extended state.
    Rec,
    /// Twin-pretrained DQN with whichever modules are enabled.
    DRec,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Random,
        PolicyKind::Lru,
        PolicyKind::Lfu,
        PolicyKind::Mfu,
        PolicyKind::BasicDqn,
        PolicyKind::Rec,
        PolicyKind::DRec,
    ];

    pub fn is_learning(self) -> bool {
        matches!(self, PolicyKind::BasicDqn | PolicyKind::Rec | PolicyKind::DRec)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Lru => "lru",
            PolicyKind::Lfu => "lfu",
            PolicyKind::Mfu => "mfu",
            PolicyKind::BasicDqn => "basic_dqn",
            PolicyKind::Rec => "rec",
            PolicyKind::DRec => "d_rec",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("policy.kind", format!("unknown policy `{s}`")))
    }
}

/// Frequency source for LFU/MFU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// Hits since the content entered the cache.
    #[default]
    InCache,
    /// Requests within the network's popularity window.
    Global,
}

/// Victim slot on the serving BS for a classical policy. Requires a full
/// cache and a missed request.
pub fn decide<R: Rng + ?Sized>(
    policy: PolicyKind,
    serving_bs: usize,
    unit: &CacheUnit,
    request: &RequestEvent,
    rng: &mut R,
) -> Result<Action> {
    decide_with(policy, serving_bs, unit, request, FrequencyMode::InCache, None, rng)
}

pub fn decide_with<R: Rng + ?Sized>(
    policy: PolicyKind,
    serving_bs: usize,
    unit: &CacheUnit,
    request: &RequestEvent,
    mode: FrequencyMode,
    popularity: Option<&PopularityWindow>,
    rng: &mut R,
) -> Result<Action> {
    if unit.contains(request.content) {
        return Err(Error::Contract(format!(
            "replacement requested for cached content {}",
            request.content.0
        )));
    }
    if !unit.is_full() {
        return Err(Error::Contract("replacement requested on a non-full cache".into()));
    }
    let freq = |s: &crate::netmodel::Slot| match (mode, popularity) {
        (FrequencyMode::Global, Some(p)) => p.count(s.content),
        _ => s.freq,
    };
    let slot = match policy {
        PolicyKind::Random => rng.random_range(0..unit.cap()),
        PolicyKind::Lru => unit.lru_slot().expect("full cache"),
        PolicyKind::Lfu => unit.argmin_by_key(freq).expect("full cache"),
        PolicyKind::Mfu => unit
            .argmin_by_key(|s| std::cmp::Reverse(freq(s)))
            .expect("full cache"),
        learning => {
            return Err(Error::Contract(format!(
                "{learning} decisions come from the agent, not a fixed rule"
            )))
        }
    };
    Ok(Action::slot(serving_bs, slot, unit.cap()))
}
