//! Bradley–Terry and Plackett–Luce preference models, and reward-model fitting.

use serde::{Deserialize, Serialize};

use crate::env::{PreferenceDataset, PromptId, Response, TokenEnv};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid, softmax, softplus};
use crate::maxent::RewardFn;

fn finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("preference-model input".into()))
    }
}

/// `p(y1 ≻ y2) = σ(r1 − r2)`.
pub fn bt_prob(r1: f64, r2: f64) -> Result<f64> {
    finite(&[r1, r2])?;
    Ok(sigmoid(r1 - r2))
}

/// A ranking: `order[k]` is the candidate placed at rank `k` (rank 0 is best).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        if order.len() < 2 {
            return Err(Error::InvalidPermutation(format!(
                "need K >= 2, got {}",
                order.len()
            )));
        }
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::InvalidPermutation(format!("{order:?} is not a bijection")));
            }
            seen[i] = true;
        }
        Ok(Self(order))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub candidates: Vec<Response>,
    pub order: Permutation,
}

/// `log Π_k exp(r_{τ(k)}) / Σ_{j≥k} exp(r_{τ(j)})`.
pub fn pl_log_prob(rewards: &[f64], tau: &Permutation) -> Result<f64> {
    finite(rewards)?;
    if tau.len() != rewards.len() {
        return Err(Error::InvalidPermutation(format!(
            "ranking of {} items for {} rewards",
            tau.len(),
            rewards.len()
        )));
    }
    let ordered: Vec<f64> = tau.as_slice().iter().map(|&i| rewards[i]).collect();
    Ok((0..ordered.len())
        .map(|k| ordered[k] - log_sum_exp(&ordered[k..]))
        .sum())
}

pub fn pl_prob(rewards: &[f64], tau: &Permutation) -> Result<f64> {
    pl_log_prob(rewards, tau).map(f64::exp)
}

/// Sequential softmax selection without replacement.
pub fn sample_ranking<R: rand::Rng + ?Sized>(rewards: &[f64], rng: &mut R) -> Result<Permutation> {
    finite(rewards)?;
    if rewards.len() < 2 {
        return Err(Error::InvalidPermutation(format!(
            "need K >= 2, got {}",
            rewards.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..rewards.len()).collect();
    let mut order = Vec::with_capacity(rewards.len());
    while remaining.len() > 1 {
        let probs = softmax(&remaining.iter().map(|&i| rewards[i]).collect::<Vec<_>>());
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        order.push(remaining.remove(pick));
    }
    order.push(remaining[0]);
    Permutation::new(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    /// One free parameter per `(prompt, response)`.
    Tabular,
    /// Prompt-specific unigram counts only: cannot see bigram or repetition structure.
    Unigram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub kind: ProxyKind,
    pub ridge: f64,
    pub step: f64,
    pub epochs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kind: ProxyKind::Tabular,
            ridge: 1e-4,
            step: 1.0,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedReward {
    pub reward: RewardFn,
    pub kind: ProxyKind,
    /// Training objective before the first epoch and after each epoch.
    pub loss_log: Vec<f64>,
}

/// Per-pair feature differences `φ(y_w) − φ(y_l)` as sparse `(param, value)` lists.
fn pair_features(env: &TokenEnv, kind: ProxyKind, prompt: PromptId, y: &Response) -> Result<Vec<(usize, f64)>> {
    let idx = env.response_index(y)?;
    Ok(match kind {
        ProxyKind::Tabular => vec![(prompt.0 * env.num_responses() + idx, 1.0)],
        ProxyKind::Unigram => {
            let v = env.vocab_size();
            let mut counts = vec![0.0; v];
            for &t in &y.tokens {
                counts[t as usize] += 1.0;
            }
            counts
                .into_iter()
                .enumerate()
                .filter(|(_, c)| *c != 0.0)
                .map(|(t, c)| (prompt.0 * v + t, c))
                .collect()
        }
    })
}

fn sparse_diff(a: &[(usize, f64)], b: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = a.to_vec();
    for &(i, x) in b {
        match out.iter_mut().find(|(j, _)| *j == i) {
            Some(e) => e.1 -= x,
            None => out.push((i, -x)),
        }
    }
    out.retain(|(_, x)| *x != 0.0);
    out
}

/// Minimizes `−E[log σ(r(x,y_w) − r(x,y_l))] + (ridge/2)‖θ‖²` by full-batch
/// gradient descent with per-prompt step scaling, then mean-centers the reward per prompt over the
/// enumerated space.
pub fn fit_reward_model(dataset: &PreferenceDataset, env: &TokenEnv, cfg: &FitConfig) -> Result<LearnedReward> {
    if dataset.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.step > 0.0) || !(cfg.ridge >= 0.0) {
        return Err(Error::InvalidConfig("fit step must be > 0 and ridge >= 0".into()));
    }
    let n_params = match cfg.kind {
        ProxyKind::Tabular => env.num_prompts() * env.num_responses(),
        ProxyKind::Unigram => env.num_prompts() * env.vocab_size(),
    };
    let diffs: Vec<Vec<(usize, f64)>> = dataset
        .pairs
        .iter()
        .map(|p| {
            env.check_prompt(p.prompt)?;
            let w = pair_features(env, cfg.kind, p.prompt, &p.chosen)?;
            let l = pair_features(env, cfg.kind, p.prompt, &p.rejected)?;
            Ok(sparse_diff(&w, &l))
        })
        .collect::<Result<_>>()?;
    let n = diffs.len() as f64;

    // Parameters split into independent per-prompt blocks; each block's
    // gradient is rescaled by n / n_x so sparse prompts are not starved.
    let block = n_params / env.num_prompts();
    let mut per_prompt = vec![0usize; env.num_prompts()];
    for p in &dataset.pairs {
        per_prompt[p.prompt.0] += 1;
    }
    let precond: Vec<f64> = per_prompt
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / c as f64 })
        .collect();
    let max_precond = precond.iter().copied().fold(0.0, f64::max);

    // With the rescaling, max‖Δφ‖²/4 + ridge·max(n/n_x) bounds the curvature
    // of every block, which keeps plain descent monotone.
    let curvature = diffs
        .iter()
        .map(|d| d.iter().map(|(_, x)| x * x).sum::<f64>())
        .fold(0.0, f64::max)
        / 4.0
        + cfg.ridge * max_precond;
    let step = cfg.step.min(1.0 / curvature.max(f64::MIN_POSITIVE));

    let objective = |theta: &[f64]| -> f64 {
        let data: f64 = diffs
            .iter()
            .map(|d| softplus(-d.iter().map(|&(i, x)| theta[i] * x).sum::<f64>()))
            .sum::<f64>()
            / n;
        data + 0.5 * cfg.ridge * theta.iter().map(|t| t * t).sum::<f64>()
    };

    let mut theta = vec![0.0; n_params];
    let mut loss_log = Vec::with_capacity(cfg.epochs + 1);
    loss_log.push(objective(&theta));
    let mut grad = vec![0.0; n_params];
    for epoch in 0..cfg.epochs {
        grad.iter_mut().zip(&theta).for_each(|(g, t)| *g = cfg.ridge * t);
        for d in &diffs {
            let m: f64 = d.iter().map(|&(i, x)| theta[i] * x).sum();
            let c = -sigmoid(-m) / n;
            for &(i, x) in d {
                grad[i] += c * x;
            }
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g *= precond[i / block];
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= step * g);
        let loss = objective(&theta);
        if !loss.is_finite() {
            return Err(Error::DivergedFit { epoch });
        }
        loss_log.push(loss);
    }

    let raw = match cfg.kind {
        ProxyKind::Tabular => RewardFn::from_table(env, "learned_tabular", theta)?,
        ProxyKind::Unigram => {
            let v = env.vocab_size();
            RewardFn::from_fn(env, "learned_unigram", |p, _, y| {
                y.tokens.iter().map(|&t| theta[p.0 * v + t as usize]).sum()
            })
        }
    };
    let means: Vec<f64> = env
        .prompts()
        .map(|p| crate::math::mean(raw.prompt_values(p)))
        .collect();
    let reward = raw.map(&raw.id.clone(), |p, _, v| v - means[p.0]);
    Ok(LearnedReward {
        reward,
        kind: cfg.kind,
        loss_log,
    })
}
