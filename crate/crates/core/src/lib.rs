//! Exactly enumerable preference-optimization laboratory.
//!
//! Everything in this crate runs on a synthetic token environment small enough
//! that every response to every prompt can be listed. That makes partition
//! functions, sequence entropies, KL divergences and population gradients
//! computable exactly, so the MaxEnt reading of SimPO, the DPO/SimPO losses and
//! the online RLOO loop can all be checked against brute-force oracles.
//!
//! Module map:
//!
//! - [`env`]: token environment, gold reward, reference policy, preference data.
//! - [`policy`]: tabular autoregressive softmax policy and its exact statistics.
//! - [`maxent`]: closed-form MaxEnt optimum, reward reparameterization and the
//!   equivalence-class checks.
//! - [`pref`]: Bradley–Terry / Plackett–Luce models and reward-model fitting.
//! - [`offline`]: SimPO, DPO and Plackett–Luce SimPO losses, gradients, training.
//! - [`online`]: shaped rewards, RLOO advantages, clipped updates, online training.
//! - [`metrics`]: run records and the diagnostics computed over them.
//! - [`verify`]: the executable derivation battery.
//! - [`checkpoint`]: on-disk policy / reward container.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod maxent;
pub mod math;
pub mod metrics;
pub mod offline;
pub mod online;
pub mod policy;
pub mod pref;
pub mod rng;
pub mod verify;

pub use env::{EnvConfig, GoldReward, PreferenceDataset, PreferencePair, PromptId, Response, TokenEnv};
pub use error::{Error, ErrorFamily, Result};
pub use maxent::{PartitionTable, RewardFn, Temperature};
pub use metrics::RunMetrics;
pub use policy::{GradientTable, Optimizer, PolicyTable, UpdateRule};
