//! Run directories, manifests and sweep indexes.

use std::path::{Path, PathBuf};

use maxent_pref::checkpoint::Checkpoint;
use maxent_pref::metrics::summarize;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{canonical_json, with_axis, RunConfig};
use crate::error::{CliError, CliResult};
use crate::lab::{execute, RunOutput};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";

/// Files every completed run directory must contain besides the manifest.
pub const RUN_ARTIFACTS: [&str; 4] = [CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE];

fn write(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Summary JSON: the run diagnostics plus identifying metadata.
pub fn summary_json(cfg: &RunConfig, out: &RunOutput) -> CliResult<Value> {
    let s = summarize(&out.metrics)?;
    Ok(json!({
        "final_win_rate": s.final_win_rate,
        "kl_slope": s.kl_slope,
        "final_kl_ref": s.final_kl_ref,
        "max_kl_consec": s.max_kl_consec,
        "overopt_onset": s.overopt_onset,
        "entropy_gap_correlation": s.entropy_gap_correlation,
        "baseline_win_rate": out.lab.baseline_win_rate,
        "config_hash": cfg.hash(),
        "method": cfg.method_label(),
        "seed": cfg.seed,
        "steps": out.metrics.len(),
        "metadata": out.metrics.metadata,
    }))
}

/// Trains `cfg` and writes its artifacts plus a manifest into `dir`.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> CliResult<Value> {
    let out = execute(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut stored = cfg.clone();
    stored.output_dir = dir.display().to_string();
    write(&dir.join(CONFIG_FILE), &stored.to_pretty_json())?;
    write(&dir.join(METRICS_FILE), &out.metrics.to_csv())?;
    let summary = summary_json(cfg, &out)?;
    write(&dir.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    let mut rewards = vec![&out.lab.gold_table];
    if let Some(p) = &out.proxy {
        rewards.push(p);
    }
    let ck = Checkpoint::new(&out.policy, &rewards);
    write(&dir.join(CHECKPOINT_FILE), &ck.to_json()?)?;
    write_manifest(dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

fn write_manifest(dir: &Path) -> CliResult<()> {
    let entries = RUN_ARTIFACTS
        .iter()
        .map(|f| Ok(ManifestEntry { file: f.to_string(), sha256: sha256_file(&dir.join(f))? }))
        .collect::<CliResult<Vec<_>>>()?;
    write(&dir.join(MANIFEST_FILE), &(serde_json::to_string_pretty(&entries).expect("json") + "\n"))
}

/// Checks that a run directory holds every artifact with the recorded digest.
pub fn check_manifest(dir: &Path) -> CliResult<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| CliError::io(&path, format!("bad manifest: {e}")))?;
    for want in RUN_ARTIFACTS {
        let entry = entries
            .iter()
            .find(|e| e.file == want)
            .ok_or_else(|| CliError::io(&path, format!("manifest lacks {want}")))?;
        let got = sha256_file(&dir.join(want))?;
        if got != entry.sha256 {
            return Err(CliError::io(&dir.join(want), "digest does not match manifest"));
        }
    }
    Ok(())
}

/// Comma-separated sweep values; an empty list is rejected.
pub fn parse_values(csv: &str) -> CliResult<Vec<Value>> {
    let values: Vec<Value> = csv
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(crate::config::parse_axis_value)
        .collect();
    if values.is_empty() {
        return Err(CliError::validation("values", "sweep needs at least one value"));
    }
    Ok(values)
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => canonical_json(other),
    }
}

fn cell_dir_name(axis: &str, v: &Value) -> String {
    let label: String = value_label(v)
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-+".contains(c) { c } else { '_' })
        .collect();
    format!("{axis}={label}")
}

/// Numbers ascending, then everything else by its canonical text.
fn value_order(a: &Value, b: &Value) -> std::cmp::Ordering {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => value_label(a).cmp(&value_label(b)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: Value,
    pub dir: String,
    pub status: String,
    pub error: Option<String>,
    pub exit_code: i32,
    pub summary: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub axis: String,
    pub base_config_hash: String,
    pub entries: Vec<SweepEntry>,
}

impl SweepIndex {
    /// Exit code of the first failing cell in index order, or 0.
    pub fn exit_code(&self) -> i32 {
        self.entries.iter().map(|e| e.exit_code).find(|c| *c != 0).unwrap_or(0)
    }
}

/// One run per value under `dir/<axis>=<value>`, then `dir/index.json`
/// ordered by value. Failing cells are recorded and the rest continue.
pub fn sweep(base: &RunConfig, axis: &str, values: &[Value], dir: &Path) -> CliResult<SweepIndex> {
    if values.is_empty() {
        return Err(CliError::validation("values", "sweep needs at least one value"));
    }
    // resolve every cell first so a bad axis or value fails before any compute
    let mut cells = values
        .iter()
        .map(|v| Ok((v.clone(), with_axis(base, axis, v)?)))
        .collect::<CliResult<Vec<_>>>()?;
    cells.sort_by(|a, b| value_order(&a.0, &b.0));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut entries = Vec::with_capacity(cells.len());
    for (value, cfg) in cells {
        let name = cell_dir_name(axis, &value);
        let cell = dir.join(&name);
        let (status, error, exit_code, summary) = match run_to_dir(&cfg, &cell) {
            Ok(s) => ("ok".to_string(), None, 0, Some(s)),
            Err(e) => ("failed".to_string(), Some(e.to_string()), e.exit_code(), None),
        };
        entries.push(SweepEntry { value, dir: name, status, error, exit_code, summary });
    }
    let index = SweepIndex { axis: axis.to_string(), base_config_hash: base.hash(), entries };
    write(&dir.join(INDEX_FILE), &(serde_json::to_string_pretty(&index).expect("json") + "\n"))?;
    Ok(index)
}

/// Output directory: explicit override, else the config's own.
pub fn output_dir(cfg: &RunConfig, overridden: Option<&Path>) -> PathBuf {
    overridden.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}
