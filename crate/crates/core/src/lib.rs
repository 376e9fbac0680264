//! Seedable edge-caching simulator and optimization toolkit.
//!
//! The crate models small-cell base stations with fixed-slot caches, a
//! cache-replacement CMDP over their request stream, a constrained DQN agent
//! with load-aware reliability interventions, classical replacement
//! baselines, and a federated network-twin subsystem that clusters base
//! stations and generates synthetic request streams for agent pre-training.

pub mod error;
pub mod experiment;
pub mod agent;
pub mod baselines;
pub mod netmodel;
pub mod reliability;
pub mod twin;
pub mod workload;

pub use error::{Error, Result};
