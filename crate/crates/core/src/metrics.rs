//! Per-step run records and the diagnostics computed from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::env::{PromptId, Response, TokenEnv};
use crate::error::{Error, Result};
use crate::math::{mean, pearson};
use crate::maxent::RewardFn;
use crate::policy::PolicyTable;

/// Float format used by every CSV/summary writer: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    columns: Vec<String>,
    steps: Vec<u64>,
    rows: Vec<Vec<f64>>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub overopt_onset: Option<u64>,
}

impl RunMetrics {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: u64, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::InvalidConfig(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if let Some(&last) = self.steps.last() {
            if step <= last {
                return Err(Error::InvalidConfig(format!("step {step} does not follow {last}")));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("column `{}` at step {step}", self.columns[i])));
        }
        self.steps.push(step);
        self.rows.push(values);
        Ok(())
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    /// Header `step,<columns>`, LF endings, floats at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (step, row) in self.steps.iter().zip(&self.rows) {
            write!(out, "{step}").unwrap();
            for v in row {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Mean over samples of `−(β/|y|) log π(y|x)`.
pub fn entropy_bonus(policy: &PolicyTable, samples: &[(PromptId, usize)], beta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let env = policy.env();
    let total: f64 = samples
        .iter()
        .map(|&(x, i)| -(beta / env.response_len(i) as f64) * policy.log_prob_index(x, i))
        .sum();
    Ok(total / samples.len() as f64)
}

/// Fraction of prompts where `candidate` beats `reference` under `gold`; ties count 0.5.
pub fn win_rate_of_responses(
    env: &TokenEnv,
    candidates: &BTreeMap<PromptId, Response>,
    references: &BTreeMap<PromptId, Response>,
    gold: &RewardFn,
) -> Result<f64> {
    gold.check_env(env)?;
    let mut score = 0.0;
    for x in env.prompts() {
        let cand = candidates.get(&x).ok_or(Error::MissingReferenceResponse(x.0))?;
        let refr = references.get(&x).ok_or(Error::MissingReferenceResponse(x.0))?;
        let a = gold.eval(env, x, cand)?;
        let b = gold.eval(env, x, refr)?;
        score += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / env.num_prompts() as f64)
}

pub fn greedy_responses(policy: &PolicyTable) -> BTreeMap<PromptId, Response> {
    policy.env().prompts().map(|x| (x, policy.greedy(x))).collect()
}

/// Greedy-decoded win rate of `policy` against fixed reference responses.
pub fn win_rate(
    policy: &PolicyTable,
    references: &BTreeMap<PromptId, Response>,
    gold: &RewardFn,
) -> Result<f64> {
    win_rate_of_responses(policy.env(), &greedy_responses(policy), references, gold)
}

/// Judge context shared by the training loops.
#[derive(Debug, Clone)]
pub struct WinRateEval {
    pub gold: RewardFn,
    pub references: BTreeMap<PromptId, Response>,
}

impl WinRateEval {
    pub fn evaluate(&self, policy: &PolicyTable) -> Result<f64> {
        win_rate(policy, &self.references, &self.gold)
    }
}

/// Least-squares slope of `ys` against `xs`; 0 for fewer than two points.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlBudget {
    pub kl_ref: Vec<f64>,
    pub kl_consec: Vec<f64>,
    pub slope: f64,
    pub final_kl_ref: f64,
    pub max_kl_consec: f64,
}

pub fn kl_budget_series(run: &RunMetrics) -> Result<KlBudget> {
    let kl_ref = run.column("kl_ref")?;
    let kl_consec = run.column("kl_consec")?;
    let steps: Vec<f64> = run.steps().iter().map(|&s| s as f64).collect();
    Ok(KlBudget {
        slope: ls_slope(&steps, &kl_ref),
        final_kl_ref: kl_ref.last().copied().unwrap_or(0.0),
        max_kl_consec: kl_consec.iter().copied().fold(0.0, f64::max),
        kl_ref,
        kl_consec,
    })
}

fn trailing_means(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            mean(&xs[lo..=t])
        })
        .collect()
}

/// First step where windowed gold has dropped by `delta` from its running peak
/// while windowed proxy is at or above its value at that peak.
pub fn detect_overoptimization(run: &RunMetrics, window: usize, delta: f64) -> Result<Option<u64>> {
    let gold = run.column("gold_reward")?;
    let proxy = run.column("proxy_reward")?;
    if window == 0 || !(delta > 0.0) {
        return Err(Error::InvalidConfig("window must be >= 1 and delta > 0".into()));
    }
    if gold.len() < window {
        return Ok(None);
    }
    let g = trailing_means(&gold, window);
    let p = trailing_means(&proxy, window);
    let mut peak = window - 1;
    for t in window - 1..g.len() {
        if g[t] > g[peak] {
            peak = t;
        }
        if g[peak] - g[t] >= delta && p[t] >= p[peak] {
            return Ok(Some(run.steps()[t]));
        }
    }
    Ok(None)
}

/// Default detector threshold: 10% of the observed gold range.
pub fn default_overopt_delta(run: &RunMetrics) -> Result<f64> {
    let gold = run.column("gold_reward")?;
    let max = gold.iter().copied().fold(f64::MIN, f64::max);
    let min = gold.iter().copied().fold(f64::MAX, f64::min);
    Ok((0.1 * (max - min)).max(f64::MIN_POSITIVE))
}

pub const DEFAULT_OVEROPT_WINDOW: usize = 5;

/// Pearson correlation between the entropy bonus and the proxy−gold gap.
pub fn entropy_gap_correlation(run: &RunMetrics) -> Result<Option<f64>> {
    let ent = run.column("entropy_bonus")?;
    let gold = run.column("gold_reward")?;
    let proxy = run.column("proxy_reward")?;
    let gap: Vec<f64> = proxy.iter().zip(&gold).map(|(p, g)| p - g).collect();
    Ok(pearson(&ent, &gap))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_win_rate: Option<f64>,
    pub kl_slope: Option<f64>,
    pub final_kl_ref: Option<f64>,
    pub max_kl_consec: Option<f64>,
    pub overopt_onset: Option<u64>,
    pub entropy_gap_correlation: Option<f64>,
}

/// Summary for any run; fields whose columns are absent are `None`.
pub fn summarize(run: &RunMetrics) -> Result<RunSummary> {
    let final_win_rate = run.column("win_rate").ok().and_then(|c| c.last().copied());
    let (kl_slope, final_kl_ref, max_kl_consec) = if run.has_column("kl_ref") && run.has_column("kl_consec") {
        let b = kl_budget_series(run)?;
        (Some(b.slope), Some(b.final_kl_ref), Some(b.max_kl_consec))
    } else if run.has_column("kl_to_init") {
        let kl = run.column("kl_to_init")?;
        let steps: Vec<f64> = run.steps().iter().map(|&s| s as f64).collect();
        (Some(ls_slope(&steps, &kl)), kl.last().copied(), None)
    } else {
        (None, None, None)
    };
    let entropy_gap_correlation = if run.has_column("entropy_bonus") {
        entropy_gap_correlation(run)?
    } else {
        None
    };
    Ok(RunSummary {
        final_win_rate,
        kl_slope,
        final_kl_ref,
        max_kl_consec,
        overopt_onset: run.overopt_onset,
        entropy_gap_correlation,
    })
}
