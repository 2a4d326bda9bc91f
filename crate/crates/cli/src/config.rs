//! Run configuration: JSON document merged over defaults, checked for unknown
//! keys, validated field by field and hashed in canonical form.

use std::path::Path;

use maxent_pref::env::{response_space_size, DEFAULT_MAX_ENUMERATION};
use maxent_pref::online::ShapingMode;
use maxent_pref::pref::ProxyKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    /// Falls back to the top-level seed when null.
    pub seed: Option<u64>,
    pub max_enumeration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    /// Falls back to the top-level seed when null.
    pub gold_seed: Option<u64>,
    pub bigram_scale: f64,
    pub repeat_penalty: f64,
    pub bound: f64,
    pub proxy_kind: ProxyKind,
    /// Preference pairs (or rankings for `pl_simpo`) sampled from the reference policy.
    pub dataset_size: usize,
    pub ranking_size: usize,
    pub fit_ridge: f64,
    pub fit_step: f64,
    pub fit_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub sft_temp: f64,
    pub noise_scale: f64,
    /// Temperature of the gold optimum that writes the judge's reference responses.
    pub judge_temp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineLoss {
    Simpo,
    Dpo,
    PlSimpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub kind: MethodKind,
    /// Offline loss; ignored for online runs.
    pub loss: OfflineLoss,
    /// Online shaping mode; ignored for offline runs.
    pub mode: ShapingMode,
    /// Shaping coefficient online, loss temperature offline (α for `pl_simpo`).
    pub beta: f64,
    pub gamma: f64,
    pub length_normalized: bool,
    pub k: usize,
    pub clip_eps: f64,
    pub minibatches: usize,
    pub prompts_per_batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Plain,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: u64,
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    pub eval_interval: u64,
    /// Offline minibatch size; ignored for online runs.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSection,
    pub reward: RewardSection,
    pub reference: ReferenceSection,
    pub method: MethodSection,
    pub schedule: ScheduleSection,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvSection {
                vocab_size: 5,
                max_len: 4,
                num_prompts: 64,
                seed: None,
                max_enumeration: DEFAULT_MAX_ENUMERATION,
            },
            reward: RewardSection {
                gold_seed: None,
                bigram_scale: 0.3,
                repeat_penalty: 5.0,
                bound: 10.0,
                proxy_kind: ProxyKind::Unigram,
                dataset_size: 16_000,
                ranking_size: 4,
                fit_ridge: 1e-4,
                fit_step: 1.0,
                fit_epochs: 500,
            },
            reference: ReferenceSection { sft_temp: 2.0, noise_scale: 0.5, judge_temp: 0.5 },
            method: MethodSection {
                kind: MethodKind::Online,
                loss: OfflineLoss::Simpo,
                mode: ShapingMode::KlConstrained,
                beta: 1.0,
                gamma: 0.5,
                length_normalized: true,
                k: 4,
                clip_eps: 0.2,
                minibatches: 4,
                prompts_per_batch: None,
            },
            schedule: ScheduleSection {
                steps: 200,
                step_size: 20.0,
                optimizer: OptimizerKind::Plain,
                eval_interval: 10,
                batch_size: 64,
            },
            output_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn env_seed(&self) -> u64 {
        self.env.seed.unwrap_or(self.seed)
    }

    pub fn gold_seed(&self) -> u64 {
        self.reward.gold_seed.unwrap_or(self.seed)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the canonical (sorted-key, compact) document without `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = self.to_value();
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }

    pub fn method_label(&self) -> String {
        match self.method.kind {
            MethodKind::Online => format!("online_{}", self.method.mode.name()),
            MethodKind::Offline => format!("offline_{}", loss_name(self.method.loss)),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let e = &self.env;
        ensure(e.vocab_size >= 2, "env.vocab_size", format!("must be >= 2, got {}", e.vocab_size))?;
        ensure(e.max_len >= 1, "env.max_len", format!("must be >= 1, got {}", e.max_len))?;
        ensure(e.num_prompts >= 1, "env.num_prompts", format!("must be >= 1, got {}", e.num_prompts))?;
        ensure(e.max_enumeration >= 1, "env.max_enumeration", "must be >= 1")?;
        let size = response_space_size(e.vocab_size, e.max_len);
        ensure(
            size <= e.max_enumeration as u128,
            "env.max_len",
            format!("response space {size} exceeds env.max_enumeration {}", e.max_enumeration),
        )?;

        let r = &self.reward;
        finite_ge(r.bigram_scale, 0.0, "reward.bigram_scale")?;
        finite_ge(r.repeat_penalty, 0.0, "reward.repeat_penalty")?;
        finite_gt(r.bound, 0.0, "reward.bound")?;
        ensure(r.dataset_size >= 1, "reward.dataset_size", "must be >= 1")?;
        ensure(
            (2..=6).contains(&r.ranking_size),
            "reward.ranking_size",
            format!("must be in 2..=6, got {}", r.ranking_size),
        )?;
        finite_ge(r.fit_ridge, 0.0, "reward.fit_ridge")?;
        finite_gt(r.fit_step, 0.0, "reward.fit_step")?;
        ensure(r.fit_epochs >= 1, "reward.fit_epochs", "must be >= 1")?;

        let f = &self.reference;
        finite_gt(f.sft_temp, 0.0, "reference.sft_temp")?;
        finite_ge(f.noise_scale, 0.0, "reference.noise_scale")?;
        finite_gt(f.judge_temp, 0.0, "reference.judge_temp")?;

        let m = &self.method;
        match m.kind {
            MethodKind::Online => finite_ge(m.beta, 0.0, "method.beta")?,
            MethodKind::Offline => finite_gt(m.beta, 0.0, "method.beta")?,
        }
        finite_ge(m.gamma, 0.0, "method.gamma")?;
        ensure(m.k >= 2, "method.k", format!("must be >= 2, got {}", m.k))?;
        ensure(
            m.clip_eps > 0.0 && m.clip_eps <= 1.0,
            "method.clip_eps",
            format!("must be in (0, 1], got {}", m.clip_eps),
        )?;
        ensure(m.minibatches >= 1, "method.minibatches", "must be >= 1")?;
        if let Some(b) = m.prompts_per_batch {
            ensure(
                b >= 1 && b <= e.num_prompts,
                "method.prompts_per_batch",
                format!("must be in 1..={}, got {b}", e.num_prompts),
            )?;
        }

        let s = &self.schedule;
        ensure(s.steps >= 1, "schedule.steps", "must be >= 1")?;
        finite_gt(s.step_size, 0.0, "schedule.step_size")?;
        ensure(s.eval_interval >= 1, "schedule.eval_interval", "must be >= 1")?;
        ensure(s.batch_size >= 1, "schedule.batch_size", "must be >= 1")?;
        ensure(!self.output_dir.is_empty(), "output_dir", "must not be empty")?;
        Ok(())
    }
}

pub fn loss_name(loss: OfflineLoss) -> &'static str {
    match loss {
        OfflineLoss::Simpo => "simpo",
        OfflineLoss::Dpo => "dpo",
        OfflineLoss::PlSimpo => "pl_simpo",
    }
}

fn ensure(ok: bool, field: &str, message: impl Into<String>) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::validation(field, message))
    }
}

fn finite_gt(x: f64, lo: f64, field: &str) -> CliResult<()> {
    ensure(x.is_finite() && x > lo, field, format!("must be finite and > {lo}, got {x}"))
}

fn finite_ge(x: f64, lo: f64, field: &str) -> CliResult<()> {
    ensure(x.is_finite() && x >= lo, field, format!("must be finite and >= {lo}, got {x}"))
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("json serializes")
}

/// Dotted paths of every leaf in `v`.
pub fn leaf_keys(v: &Value) -> Vec<String> {
    fn go(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&path, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    go("", v, &mut out);
    out
}

fn all_keys(v: &Value) -> Vec<String> {
    fn go(prefix: &str, v: &Value, out: &mut Vec<String>) {
        if let Value::Object(m) = v {
            for (k, child) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(path.clone());
                go(&path, child, out);
            }
        }
    }
    let mut out = Vec::new();
    go("", v, &mut out);
    out
}

/// Nearest known key within edit distance 2, if any.
fn suggest(key: &str, known: &[String]) -> Option<String> {
    known
        .iter()
        .map(|k| (strsim::levenshtein(key, k), k))
        .filter(|(d, _)| *d <= 2)
        .min()
        .map(|(_, k)| k.clone())
}

fn unknown(key: String, defaults: &Value) -> CliError {
    let suggestion = suggest(&key, &all_keys(defaults));
    CliError::UnknownKey { key, suggestion }
}

/// Overlays `user` onto `base`, rejecting keys that `base` does not have.
fn merge(base: &mut Value, user: &Value, prefix: &str, defaults: &Value) -> CliResult<()> {
    let Value::Object(u) = user else {
        let field = if prefix.is_empty() { "<root>" } else { prefix };
        return Err(CliError::validation(field, "expected an object"));
    };
    let Value::Object(b) = base else { unreachable!("merge target is always an object") };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match b.get_mut(k) {
            None => return Err(unknown(path, defaults)),
            Some(slot @ Value::Object(_)) => merge(slot, v, &path, defaults)?,
            Some(slot) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn from_value(v: Value) -> CliResult<RunConfig> {
    serde_path_to_error::deserialize::<_, RunConfig>(v).map_err(|e| {
        let field = e.path().to_string();
        CliError::Validation { field, message: e.into_inner().to_string() }
    })
}

/// Parses and validates a config document. Missing keys take defaults.
pub fn parse_config_str(text: &str) -> CliResult<RunConfig> {
    let user: Value = serde_json::from_str(text).map_err(|e| CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let defaults = RunConfig::default().to_value();
    let mut doc = defaults.clone();
    merge(&mut doc, &user, "", &defaults)?;
    let cfg = from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text)
}

/// A sweep value: JSON if it parses, otherwise a bare string.
pub fn parse_axis_value(token: &str) -> Value {
    let t = token.trim();
    serde_json::from_str(t).unwrap_or_else(|_| Value::String(t.to_string()))
}

/// Copy of `cfg` with the scalar at dotted `axis` replaced by `value`.
pub fn with_axis(cfg: &RunConfig, axis: &str, value: &Value) -> CliResult<RunConfig> {
    let defaults = RunConfig::default().to_value();
    let leaves = leaf_keys(&defaults);
    if !leaves.iter().any(|k| k == axis) {
        let suggestion = suggest(axis, &leaves);
        return Err(CliError::UnknownKey { key: axis.to_string(), suggestion });
    }
    let mut doc = cfg.to_value();
    let mut slot = &mut doc;
    for part in axis.split('.') {
        slot = slot.get_mut(part).expect("leaf exists in every resolved config");
    }
    *slot = value.clone();
    let out = from_value(doc)?;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let d = RunConfig::default();
        d.validate().unwrap();
        assert_eq!(parse_config_str(&d.to_pretty_json()).unwrap(), d);
        assert_eq!(parse_config_str("{}").unwrap(), d);
    }

    #[test]
    fn minimal_config_hash_ignores_key_order() {
        let a = parse_config_str(r#"{"seed": 3, "env": {"vocab_size": 4, "max_len": 3}}"#).unwrap();
        let b = parse_config_str(r#"{"env": {"max_len": 3, "vocab_size": 4}, "seed": 3}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.env.num_prompts, 64);
        let c = parse_config_str(r#"{"seed": 4, "env": {"vocab_size": 4, "max_len": 3}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = parse_config_str(r#"{"output_dir": "x"}"#).unwrap();
        let b = parse_config_str(r#"{"output_dir": "y"}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn vocab_size_one_names_field() {
        let e = parse_config_str(r#"{"env": {"vocab_size": 1}}"#).unwrap_err();
        match e {
            CliError::Validation { field, .. } => assert_eq!(field, "env.vocab_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = parse_config_str(r#"{"env": {"vocabsize": 4}}"#).unwrap_err();
        assert_eq!(
            e,
            CliError::UnknownKey { key: "env.vocabsize".into(), suggestion: Some("env.vocab_size".into()) }
        );
        let e = parse_config_str(r#"{"zzzzzzzz": 1}"#).unwrap_err();
        assert_eq!(e, CliError::UnknownKey { key: "zzzzzzzz".into(), suggestion: None });
    }

    #[test]
    fn parse_errors_carry_position() {
        let e = parse_config_str("{\n  \"seed\": 1,\n  \"env\": {\"vocab_size\": }\n}").unwrap_err();
        match e {
            CliError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_errors_name_field() {
        let e = parse_config_str(r#"{"method": {"mode": "sideways"}}"#).unwrap_err();
        assert!(matches!(e, CliError::Validation { ref field, .. } if field == "method.mode"), "{e:?}");
        let e = parse_config_str(r#"{"schedule": {"steps": "many"}}"#).unwrap_err();
        assert!(matches!(e, CliError::Validation { ref field, .. } if field == "schedule.steps"), "{e:?}");
    }

    #[test]
    fn range_checks_name_fields() {
        let cases = [
            (r#"{"method": {"clip_eps": 0}}"#, "method.clip_eps"),
            (r#"{"method": {"k": 1}}"#, "method.k"),
            (r#"{"env": {"max_len": 12}}"#, "env.max_len"),
            (r#"{"method": {"prompts_per_batch": 65}}"#, "method.prompts_per_batch"),
            (r#"{"schedule": {"step_size": -1}}"#, "schedule.step_size"),
            (r#"{"method": {"kind": "offline", "beta": 0}}"#, "method.beta"),
            (r#"{"reward": {"ranking_size": 7}}"#, "reward.ranking_size"),
            (r#"{"env": 3}"#, "env"),
        ];
        for (doc, field) in cases {
            match parse_config_str(doc).unwrap_err() {
                CliError::Validation { field: f, .. } => assert_eq!(f, field, "{doc}"),
                other => panic!("{doc}: {other:?}"),
            }
        }
    }

    #[test]
    fn seeds_fall_back_to_top_level() {
        let c = parse_config_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!((c.env_seed(), c.gold_seed()), (9, 9));
        let c = parse_config_str(r#"{"seed": 9, "env": {"seed": 2}, "reward": {"gold_seed": 3}}"#).unwrap();
        assert_eq!((c.env_seed(), c.gold_seed()), (2, 3));
    }

    #[test]
    fn axis_override() {
        let base = RunConfig::default();
        let c = with_axis(&base, "method.gamma", &parse_axis_value("0.25")).unwrap();
        assert_eq!(c.method.gamma, 0.25);
        let c = with_axis(&base, "method.mode", &parse_axis_value("maxent")).unwrap();
        assert_eq!(c.method.mode, ShapingMode::Maxent);
        assert!(matches!(
            with_axis(&base, "method.gama", &Value::from(1.0)),
            Err(CliError::UnknownKey { suggestion: Some(ref s), .. }) if s == "method.gamma"
        ));
        assert!(matches!(with_axis(&base, "env", &Value::from(1.0)), Err(CliError::UnknownKey { .. })));
        assert!(matches!(
            with_axis(&base, "method.clip_eps", &Value::from(2.0)),
            Err(CliError::Validation { .. })
        ));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: Value = serde_json::from_str(r#"{"b": 1, "a": {"d": 2, "c": [3, {"f": 1, "e": 0}]}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":[3,{"e":0,"f":1}],"d":2},"b":1}"#);
    }
}
