//! Offline preference losses (SimPO, DPO, Plackett–Luce SimPO), their analytic
//! gradients, and a minibatch training loop.
//!
//! Every `*_grad` returns the gradient of the corresponding loss. Training
//! descends it by handing the negated table to [`PolicyTable::apply_gradient`],
//! which ascends.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{PreferenceDataset, PreferencePair, PromptId, RankedItem, TokenEnv};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, mean, sigmoid, softmax, softplus};
use crate::maxent::RewardFn;
use crate::metrics::{RunMetrics, WinRateEval};
use crate::policy::{mean_kl_exact, GradientTable, Optimizer, PolicyTable, UpdateRule};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimpoConfig {
    pub beta: f64,
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub length_normalized: bool,
}

fn default_true() -> bool {
    true
}

impl SimpoConfig {
    pub fn new(beta: f64, gamma: f64) -> Self {
        Self { beta, gamma, length_normalized: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    fn coef(&self, len: usize) -> f64 {
        if self.length_normalized {
            self.beta / len as f64
        } else {
            self.beta
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpoConfig {
    pub beta: f64,
    pub reference: PolicyTable,
}

impl DpoConfig {
    pub fn validate(&self, env: &TokenEnv) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.reference.env().same_env(env) {
            return Err(Error::EnvMismatch);
        }
        Ok(())
    }
}

/// SimPO default target-margin grid.
pub const GAMMA_GRID: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, Copy)]
struct PairIdx {
    prompt: PromptId,
    w: usize,
    l: usize,
}

fn resolve_pairs(env: &TokenEnv, batch: &[PreferencePair]) -> Result<Vec<PairIdx>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .map(|p| {
            env.check_prompt(p.prompt)?;
            Ok(PairIdx {
                prompt: p.prompt,
                w: env.response_index(&p.chosen)?,
                l: env.response_index(&p.rejected)?,
            })
        })
        .collect()
}

/// Items in rank order: `idx[0]` is the top-ranked response.
#[derive(Debug, Clone)]
struct RankIdx {
    prompt: PromptId,
    idx: Vec<usize>,
}

fn resolve_rankings(env: &TokenEnv, batch: &[RankedItem]) -> Result<Vec<RankIdx>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .map(|item| {
            env.check_prompt(item.prompt)?;
            let r = &item.ranking;
            if r.candidates.len() < 2 || r.order.len() != r.candidates.len() {
                return Err(Error::InvalidPermutation(format!(
                    "ranking of {} positions over {} candidates",
                    r.order.len(),
                    r.candidates.len()
                )));
            }
            let idx = r
                .order
                .as_slice()
                .iter()
                .map(|&k| env.response_index(&r.candidates[k]))
                .collect::<Result<Vec<_>>>()?;
            Ok(RankIdx { prompt: item.prompt, idx })
        })
        .collect()
}

fn simpo_u(policy: &PolicyTable, cfg: &SimpoConfig, p: PairIdx) -> (f64, f64, f64) {
    let env = policy.env();
    let lw = policy.log_prob_index(p.prompt, p.w);
    let ll = policy.log_prob_index(p.prompt, p.l);
    let u = cfg.coef(env.response_len(p.w)) * lw - cfg.coef(env.response_len(p.l)) * ll - cfg.gamma;
    (u, lw, ll)
}

fn simpo_loss_idx(policy: &PolicyTable, pairs: &[PairIdx], cfg: &SimpoConfig) -> f64 {
    pairs.iter().map(|&p| softplus(-simpo_u(policy, cfg, p).0)).sum::<f64>() / pairs.len() as f64
}

fn simpo_grad_idx(policy: &PolicyTable, pairs: &[PairIdx], cfg: &SimpoConfig) -> GradientTable {
    let env = policy.env();
    let n = pairs.len() as f64;
    let mut g = GradientTable::zeros_like(policy);
    for &p in pairs {
        let s = sigmoid(-simpo_u(policy, cfg, p).0) / n;
        policy.accumulate_log_prob_grad(p.prompt, p.w, -s * cfg.coef(env.response_len(p.w)), &mut g);
        policy.accumulate_log_prob_grad(p.prompt, p.l, s * cfg.coef(env.response_len(p.l)), &mut g);
    }
    g
}

/// Mean of `softplus(−u)`, `u = (β/|y_w|) log π(y_w) − (β/|y_l|) log π(y_l) − γ`.
pub fn simpo_loss(policy: &PolicyTable, batch: &[PreferencePair], cfg: &SimpoConfig) -> Result<f64> {
    cfg.validate()?;
    let pairs = resolve_pairs(policy.env(), batch)?;
    Ok(simpo_loss_idx(policy, &pairs, cfg))
}

pub fn simpo_grad(policy: &PolicyTable, batch: &[PreferencePair], cfg: &SimpoConfig) -> Result<GradientTable> {
    cfg.validate()?;
    let pairs = resolve_pairs(policy.env(), batch)?;
    Ok(simpo_grad_idx(policy, &pairs, cfg))
}

fn dpo_u(policy: &PolicyTable, cfg: &DpoConfig, p: PairIdx) -> (f64, f64, f64) {
    let lw = policy.log_prob_index(p.prompt, p.w);
    let ll = policy.log_prob_index(p.prompt, p.l);
    let rw = cfg.reference.log_prob_index(p.prompt, p.w);
    let rl = cfg.reference.log_prob_index(p.prompt, p.l);
    (cfg.beta * ((lw - ll) - (rw - rl)), lw, ll)
}

fn dpo_loss_idx(policy: &PolicyTable, pairs: &[PairIdx], cfg: &DpoConfig) -> f64 {
    pairs.iter().map(|&p| softplus(-dpo_u(policy, cfg, p).0)).sum::<f64>() / pairs.len() as f64
}

fn dpo_grad_idx(policy: &PolicyTable, pairs: &[PairIdx], cfg: &DpoConfig) -> GradientTable {
    let n = pairs.len() as f64;
    let mut g = GradientTable::zeros_like(policy);
    for &p in pairs {
        let s = cfg.beta * sigmoid(-dpo_u(policy, cfg, p).0) / n;
        policy.accumulate_log_prob_grad(p.prompt, p.w, -s, &mut g);
        policy.accumulate_log_prob_grad(p.prompt, p.l, s, &mut g);
    }
    g
}

/// Mean of `−log σ(β[(log π(y_w) − log π(y_l)) − (log π_ref(y_w) − log π_ref(y_l))])`.
pub fn dpo_loss(policy: &PolicyTable, batch: &[PreferencePair], cfg: &DpoConfig) -> Result<f64> {
    cfg.validate(policy.env())?;
    let pairs = resolve_pairs(policy.env(), batch)?;
    Ok(dpo_loss_idx(policy, &pairs, cfg))
}

pub fn dpo_grad(policy: &PolicyTable, batch: &[PreferencePair], cfg: &DpoConfig) -> Result<GradientTable> {
    cfg.validate(policy.env())?;
    let pairs = resolve_pairs(policy.env(), batch)?;
    Ok(dpo_grad_idx(policy, &pairs, cfg))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveAlpha(alpha))
    }
}

fn pl_scores(policy: &PolicyTable, item: &RankIdx, alpha: f64) -> Vec<f64> {
    item.idx.iter().map(|&i| alpha * policy.log_prob_index(item.prompt, i)).collect()
}

fn pl_loss_idx(policy: &PolicyTable, items: &[RankIdx], alpha: f64) -> f64 {
    let total: f64 = items
        .iter()
        .map(|item| {
            let s = pl_scores(policy, item, alpha);
            (0..s.len()).map(|k| log_sum_exp(&s[k..]) - s[k]).sum::<f64>()
        })
        .sum();
    total / items.len() as f64
}

fn pl_grad_idx(policy: &PolicyTable, items: &[RankIdx], alpha: f64) -> GradientTable {
    let n = items.len() as f64;
    let mut g = GradientTable::zeros_like(policy);
    for item in items {
        let s = pl_scores(policy, item, alpha);
        // d/ds_m of Σ_k [LSE(s_k..) − s_k] = Σ_{k≤m} softmax(s_k..)_m − 1
        let mut d = vec![-1.0; s.len()];
        for k in 0..s.len() {
            for (j, p) in softmax(&s[k..]).into_iter().enumerate() {
                d[k + j] += p;
            }
        }
        for (m, &i) in item.idx.iter().enumerate() {
            policy.accumulate_log_prob_grad(item.prompt, i, alpha * d[m] / n, &mut g);
        }
    }
    g
}

/// Mean Plackett–Luce negative log-likelihood with scores `α log π(y|x)`.
pub fn pl_simpo_loss(policy: &PolicyTable, batch: &[RankedItem], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let items = resolve_rankings(policy.env(), batch)?;
    Ok(pl_loss_idx(policy, &items, alpha))
}

pub fn pl_simpo_grad(policy: &PolicyTable, batch: &[RankedItem], alpha: f64) -> Result<GradientTable> {
    check_alpha(alpha)?;
    let items = resolve_rankings(policy.env(), batch)?;
    Ok(pl_grad_idx(policy, &items, alpha))
}

/// Batch mean of `log π_ref(y_w|x) − log π_ref(y_l|x)`.
pub fn ref_margin(reference: &PolicyTable, batch: &[PreferencePair]) -> Result<f64> {
    let pairs = resolve_pairs(reference.env(), batch)?;
    Ok(ref_margin_idx(reference, &pairs))
}

fn ref_margin_idx(reference: &PolicyTable, pairs: &[PairIdx]) -> f64 {
    pairs
        .iter()
        .map(|p| reference.log_prob_index(p.prompt, p.w) - reference.log_prob_index(p.prompt, p.l))
        .sum::<f64>()
        / pairs.len() as f64
}

/// Population SimPO loss: every ordered pair `(y1, y2)` drawn from `sampler`
/// with weight `μ(y1)μ(y2)`, labelled by Bradley–Terry under `target`.
/// Averaged over prompts. Quadratic in the response count.
pub fn simpo_population_loss(
    policy: &PolicyTable,
    sampler: &PolicyTable,
    target: &RewardFn,
    cfg: &SimpoConfig,
) -> Result<f64> {
    population_pass(policy, sampler, target, cfg, None)
}

pub fn simpo_population_grad(
    policy: &PolicyTable,
    sampler: &PolicyTable,
    target: &RewardFn,
    cfg: &SimpoConfig,
) -> Result<GradientTable> {
    let mut g = GradientTable::zeros_like(policy);
    population_pass(policy, sampler, target, cfg, Some(&mut g))?;
    Ok(g)
}

fn population_pass(
    policy: &PolicyTable,
    sampler: &PolicyTable,
    target: &RewardFn,
    cfg: &SimpoConfig,
    mut grad: Option<&mut GradientTable>,
) -> Result<f64> {
    cfg.validate()?;
    let env = policy.env();
    if !sampler.env().same_env(env) {
        return Err(Error::EnvMismatch);
    }
    target.check_env(env)?;
    let n = env.num_responses();
    let np = env.num_prompts() as f64;
    let coef: Vec<f64> = (0..n).map(|i| cfg.coef(env.response_len(i))).collect();
    let mut loss = 0.0;
    for x in env.prompts() {
        let lp = policy.sequence_log_probs(x);
        let mu: Vec<f64> = sampler.sequence_log_probs(x).into_iter().map(f64::exp).collect();
        let r = target.prompt_values(x);
        let mut c = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                let w = mu[a] * mu[b] * sigmoid(r[a] - r[b]);
                if w == 0.0 {
                    continue;
                }
                let u = coef[a] * lp[a] - coef[b] * lp[b] - cfg.gamma;
                loss += w * softplus(-u);
                let s = w * sigmoid(-u);
                c[a] -= s * coef[a];
                c[b] += s * coef[b];
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            for v in c.iter_mut() {
                *v /= np;
            }
            policy.accumulate_weighted_log_prob_grad(x, &c, g);
        }
    }
    Ok(loss / np)
}

#[derive(Debug, Clone)]
pub enum OfflineMethod {
    Simpo(SimpoConfig),
    Dpo(DpoConfig),
    PlSimpo { alpha: f64 },
}

impl OfflineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            OfflineMethod::Simpo(_) => "simpo",
            OfflineMethod::Dpo(_) => "dpo",
            OfflineMethod::PlSimpo { .. } => "pl_simpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineSchedule {
    pub steps: u64,
    pub batch_size: usize,
    pub update: UpdateRule,
    pub eval_interval: u64,
    pub seed: u64,
}

pub const OFFLINE_COLUMNS: [&str; 8] = [
    "loss",
    "chosen_logp",
    "rejected_logp",
    "margin",
    "ref_margin",
    "grad_norm",
    "kl_to_init",
    "win_rate",
];

/// Shuffled minibatches of `0..n`, reshuffled at every epoch boundary.
struct EpochBatches {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochBatches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self { n, batch, seed, epoch: 0, order: Vec::new(), pos: n }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng_from(self.seed, &[stream::BATCHES, self.epoch]));
            self.epoch += 1;
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

struct StepStats {
    loss: f64,
    chosen: f64,
    rejected: f64,
    margin: f64,
    ref_margin: f64,
    grad: GradientTable,
}

/// Minibatch gradient descent on the chosen loss.
///
/// Row `t` holds the batch statistics measured before update `t`, and
/// `kl_to_init` / `win_rate` of the policy after it. The win rate is
/// re-evaluated every `eval_interval` steps and on the last step, and carried
/// forward in between. `ref_margin` is measured against the DPO reference, or
/// against `policy0` for the reference-free methods.
pub fn train_offline(
    policy0: &PolicyTable,
    dataset: &PreferenceDataset,
    method: &OfflineMethod,
    schedule: &OfflineSchedule,
    eval: &WinRateEval,
) -> Result<(PolicyTable, RunMetrics)> {
    let env = policy0.env().clone();
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if schedule.batch_size == 0 || schedule.eval_interval == 0 {
        return Err(Error::InvalidConfig("batch_size and eval_interval must be >= 1".into()));
    }
    let mut opt = Optimizer::new(schedule.update)?;
    match method {
        OfflineMethod::Simpo(cfg) => cfg.validate()?,
        OfflineMethod::Dpo(cfg) => cfg.validate(&env)?,
        OfflineMethod::PlSimpo { alpha } => check_alpha(*alpha)?,
    }
    let pairs = match method {
        OfflineMethod::PlSimpo { .. } => Vec::new(),
        _ => {
            if dataset.pairs.is_empty() {
                return Err(Error::EmptyDataset);
            }
            resolve_pairs(&env, &dataset.pairs)?
        }
    };
    let ranked = match method {
        OfflineMethod::PlSimpo { .. } => resolve_rankings(&env, &dataset.as_rankings())?,
        _ => Vec::new(),
    };
    let n_items = pairs.len().max(ranked.len());
    let reference = match method {
        OfflineMethod::Dpo(cfg) => cfg.reference.clone(),
        _ => policy0.clone(),
    };

    let mut metrics = RunMetrics::new(&OFFLINE_COLUMNS);
    metrics.set_meta("method", method.name());
    metrics.set_meta("seed", schedule.seed);
    let mut policy = policy0.clone();
    if schedule.steps == 0 {
        return Ok((policy, metrics));
    }
    let mut batches = EpochBatches::new(n_items, schedule.batch_size, schedule.seed);
    let mut win = eval.evaluate(&policy)?;
    for step in 1..=schedule.steps {
        let ids = batches.next_batch();
        let stats = match method {
            OfflineMethod::Simpo(cfg) => {
                let b: Vec<PairIdx> = ids.iter().map(|&i| pairs[i]).collect();
                pair_stats(&b, &reference, |p| simpo_u(&policy, cfg, p), simpo_loss_idx(&policy, &b, cfg), simpo_grad_idx(&policy, &b, cfg))
            }
            OfflineMethod::Dpo(cfg) => {
                let b: Vec<PairIdx> = ids.iter().map(|&i| pairs[i]).collect();
                pair_stats(&b, &reference, |p| dpo_u(&policy, cfg, p), dpo_loss_idx(&policy, &b, cfg), dpo_grad_idx(&policy, &b, cfg))
            }
            OfflineMethod::PlSimpo { alpha } => {
                let b: Vec<RankIdx> = ids.iter().map(|&i| ranked[i].clone()).collect();
                ranked_stats(&policy, &b, &reference, *alpha)
            }
        };
        let grad_norm = stats.grad.norm();
        policy.apply_gradient(&stats.grad.scaled(-1.0), &mut opt)?;
        let kl = mean_kl_exact(&policy, policy0)?;
        if step % schedule.eval_interval == 0 || step == schedule.steps {
            win = eval.evaluate(&policy)?;
        }
        metrics.push(
            step,
            vec![stats.loss, stats.chosen, stats.rejected, stats.margin, stats.ref_margin, grad_norm, kl, win],
        )?;
    }
    Ok((policy, metrics))
}

fn pair_stats(
    batch: &[PairIdx],
    reference: &PolicyTable,
    u: impl Fn(PairIdx) -> (f64, f64, f64),
    loss: f64,
    grad: GradientTable,
) -> StepStats {
    let n = batch.len() as f64;
    let (mut chosen, mut rejected, mut margin) = (0.0, 0.0, 0.0);
    for &p in batch {
        let (m, lw, ll) = u(p);
        chosen += lw;
        rejected += ll;
        margin += m;
    }
    StepStats {
        loss,
        chosen: chosen / n,
        rejected: rejected / n,
        margin: margin / n,
        ref_margin: ref_margin_idx(reference, batch),
        grad,
    }
}

fn ranked_stats(policy: &PolicyTable, batch: &[RankIdx], reference: &PolicyTable, alpha: f64) -> StepStats {
    let top: Vec<f64> = batch.iter().map(|it| policy.log_prob_index(it.prompt, it.idx[0])).collect();
    let bottom: Vec<f64> = batch
        .iter()
        .map(|it| policy.log_prob_index(it.prompt, *it.idx.last().unwrap()))
        .collect();
    let ref_gap: Vec<f64> = batch
        .iter()
        .map(|it| reference.log_prob_index(it.prompt, it.idx[0]) - reference.log_prob_index(it.prompt, *it.idx.last().unwrap()))
        .collect();
    let margin: Vec<f64> = top.iter().zip(&bottom).map(|(t, b)| alpha * (t - b)).collect();
    StepStats {
        loss: pl_loss_idx(policy, batch, alpha),
        chosen: mean(&top),
        rejected: mean(&bottom),
        margin: mean(&margin),
        ref_margin: mean(&ref_gap),
        grad: pl_grad_idx(policy, batch, alpha),
    }
}
