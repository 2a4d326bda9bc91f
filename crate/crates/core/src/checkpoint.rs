//! JSON container for a policy and optional reward tables, tied to the env
//! that produced them by config and fingerprint.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{build_env, EnvConfig, TokenEnv};
use crate::error::{Error, Result};
use crate::maxent::RewardFn;
use crate::policy::PolicyTable;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEntry {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub env: EnvConfig,
    pub fingerprint: String,
    pub version: u64,
    pub logits: Vec<f64>,
    #[serde(default)]
    pub rewards: Vec<RewardEntry>,
}

impl Checkpoint {
    pub fn new(policy: &PolicyTable, rewards: &[&RewardFn]) -> Self {
        let env = policy.env();
        Self {
            format: CHECKPOINT_FORMAT,
            env: env.config().clone(),
            fingerprint: env.fingerprint().to_string(),
            version: policy.version(),
            logits: policy.logits().to_vec(),
            rewards: rewards
                .iter()
                .map(|r| RewardEntry { id: r.id.clone(), values: r.values().to_vec() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                ck.format
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the environment and checks it against the stored fingerprint.
    pub fn env(&self) -> Result<Arc<TokenEnv>> {
        let env = build_env(self.env.clone())?;
        self.check_env(&env)?;
        Ok(env)
    }

    pub fn check_env(&self, env: &TokenEnv) -> Result<()> {
        if env.fingerprint() != self.fingerprint || env.config() != &self.env {
            return Err(Error::EnvMismatch);
        }
        Ok(())
    }

    pub fn policy(&self, env: &Arc<TokenEnv>) -> Result<PolicyTable> {
        self.check_env(env)?;
        let mut p = PolicyTable::from_logits(env, self.logits.clone())?;
        p.set_version(self.version);
        Ok(p)
    }

    pub fn reward(&self, env: &TokenEnv, id: &str) -> Result<RewardFn> {
        self.check_env(env)?;
        let entry = self
            .rewards
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint has no reward `{id}`")))?;
        RewardFn::from_table(env, id, entry.values.clone())
    }
}
