//! Online loop: shaped rewards, leave-one-out advantages and a clipped
//! sequence-level policy update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{PromptId, Response};
use crate::error::{Error, Result};
use crate::math::mean;
use crate::maxent::RewardFn;
use crate::metrics::{default_overopt_delta, detect_overoptimization, entropy_bonus, entropy_gap_correlation, RunMetrics, WinRateEval, DEFAULT_OVEROPT_WINDOW};
use crate::policy::{mean_kl_exact, GradientTable, Optimizer, PolicyTable, UpdateRule};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingMode {
    KlConstrained,
    Maxent,
    Minent,
    None,
}

impl ShapingMode {
    pub fn name(&self) -> &'static str {
        match self {
            ShapingMode::KlConstrained => "kl_constrained",
            ShapingMode::Maxent => "maxent",
            ShapingMode::Minent => "minent",
            ShapingMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub mode: ShapingMode,
    pub beta: f64,
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Coefficient used for the logged entropy bonus: the shaping β for the
    /// entropy-shaped modes, 1 otherwise.
    pub fn bonus_beta(&self) -> f64 {
        match self.mode {
            ShapingMode::Maxent | ShapingMode::Minent => self.beta,
            ShapingMode::KlConstrained | ShapingMode::None => 1.0,
        }
    }
}

fn shaped_value(
    proxy: f64,
    log_pi: f64,
    log_ref: Option<f64>,
    len: usize,
    cfg: &ShapingConfig,
) -> Result<f64> {
    Ok(match cfg.mode {
        ShapingMode::None => proxy,
        ShapingMode::KlConstrained => proxy - cfg.beta * (log_pi - log_ref.ok_or(Error::MissingReference)?),
        ShapingMode::Maxent => proxy - cfg.beta / len as f64 * log_pi,
        ShapingMode::Minent => proxy + cfg.beta / len as f64 * log_pi,
    })
}

/// Shaped reward of one response.
///
/// - `kl_constrained`: `r − β(log π − log π_ref)`
/// - `maxent`: `r − (β/|y|) log π`
/// - `minent`: `r + (β/|y|) log π`
/// - `none`: `r`
pub fn shaped_reward(
    proxy: &RewardFn,
    policy: &PolicyTable,
    reference: Option<&PolicyTable>,
    prompt: PromptId,
    response: &Response,
    cfg: &ShapingConfig,
) -> Result<f64> {
    cfg.validate()?;
    let env = policy.env();
    let idx = env.response_index(response)?;
    env.check_prompt(prompt)?;
    proxy.check_env(env)?;
    if let Some(r) = reference {
        if !r.env().same_env(env) {
            return Err(Error::EnvMismatch);
        }
    }
    shaped_value(
        proxy.get(prompt, idx),
        policy.log_prob_index(prompt, idx),
        reference.map(|r| r.log_prob_index(prompt, idx)),
        response.len(),
        cfg,
    )
}

/// `a_i = r_i − mean_{j≠i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::TooFewSamples(k));
    }
    let m = mean(rewards);
    let scale = k as f64 / (k - 1) as f64;
    Ok(rewards.iter().map(|r| scale * (r - m)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineSample {
    pub prompt: PromptId,
    pub index: usize,
    pub advantage: f64,
}

/// `mean(A · ∇log π(y|x))` over the batch.
pub fn policy_gradient_estimate(policy: &PolicyTable, batch: &[OnlineSample]) -> Result<GradientTable> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = GradientTable::zeros_like(policy);
    let n = batch.len() as f64;
    for s in batch {
        policy.accumulate_log_prob_grad(s.prompt, s.index, s.advantage / n, &mut g);
    }
    Ok(g)
}

/// Exact `∇ E_{π}[r]` averaged over prompts, with `r` held fixed.
pub fn exact_policy_gradient(policy: &PolicyTable, rewards: &RewardFn) -> Result<GradientTable> {
    let env = policy.env();
    rewards.check_env(env)?;
    let mut g = GradientTable::zeros_like(policy);
    let np = env.num_prompts() as f64;
    for x in env.prompts() {
        let coefs: Vec<f64> = policy
            .sequence_log_probs(x)
            .iter()
            .zip(rewards.prompt_values(x))
            .map(|(lp, r)| lp.exp() * r / np)
            .collect();
        policy.accumulate_weighted_log_prob_grad(x, &coefs, &mut g);
    }
    Ok(g)
}

/// Gradient of the clipped surrogate `mean(min(ρA, clip(ρ, 1−ε, 1+ε)A))` and
/// the number of items whose ratio sat outside the trust region.
pub fn clipped_surrogate_grad(
    policy: &PolicyTable,
    behavior: &PolicyTable,
    batch: &[OnlineSample],
    clip_eps: f64,
) -> Result<(GradientTable, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !behavior.env().same_env(policy.env()) {
        return Err(Error::SnapshotMismatch);
    }
    let mut g = GradientTable::zeros_like(policy);
    let n = batch.len() as f64;
    let mut clipped = 0;
    for s in batch {
        let rho = (policy.log_prob_index(s.prompt, s.index) - behavior.log_prob_index(s.prompt, s.index)).exp();
        if (s.advantage > 0.0 && rho > 1.0 + clip_eps) || (s.advantage < 0.0 && rho < 1.0 - clip_eps) {
            clipped += 1;
            continue;
        }
        policy.accumulate_log_prob_grad(s.prompt, s.index, rho * s.advantage / n, &mut g);
    }
    Ok((g, clipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClipStats {
    pub clip_frac: f64,
    pub clipped: usize,
    pub items: usize,
}

/// One pass of clipped-surrogate ascent over the batch, split into
/// `minibatches` contiguous slices of near-equal size applied in order.
/// With one slice every ratio is 1 and the step is a plain policy-gradient step.
pub fn ppo_clip_step(
    policy: &mut PolicyTable,
    behavior: &PolicyTable,
    batch: &[OnlineSample],
    clip_eps: f64,
    minibatches: usize,
    opt: &mut Optimizer,
) -> Result<ClipStats> {
    if !(clip_eps > 0.0 && clip_eps <= 1.0) {
        return Err(Error::InvalidConfig(format!("clip_eps must be in (0, 1], got {clip_eps}")));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !behavior.env().same_env(policy.env()) {
        return Err(Error::SnapshotMismatch);
    }
    let slices = minibatches.clamp(1, batch.len());
    let mut clipped = 0;
    for m in 0..slices {
        let part = &batch[m * batch.len() / slices..(m + 1) * batch.len() / slices];
        let (g, c) = clipped_surrogate_grad(policy, behavior, part, clip_eps)?;
        clipped += c;
        policy.apply_gradient(&g, opt)?;
    }
    Ok(ClipStats {
        clip_frac: clipped as f64 / batch.len() as f64,
        clipped,
        items: batch.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlooConfig {
    pub k: usize,
    pub clip_eps: f64,
    pub update: UpdateRule,
    pub steps: u64,
    /// `None` uses every prompt at every step; otherwise prompts rotate.
    pub prompts_per_batch: Option<usize>,
    pub eval_interval: u64,
    pub minibatches: usize,
}

impl Default for RlooConfig {
    fn default() -> Self {
        Self {
            k: 4,
            clip_eps: 0.2,
            update: UpdateRule::Plain { step: 0.5 },
            steps: 100,
            prompts_per_batch: None,
            eval_interval: 10,
            minibatches: 4,
        }
    }
}

impl RlooConfig {
    pub fn validate(&self, num_prompts: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::TooFewSamples(self.k));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps <= 1.0) {
            return Err(Error::InvalidConfig(format!("clip_eps must be in (0, 1], got {}", self.clip_eps)));
        }
        if self.eval_interval == 0 || self.minibatches == 0 {
            return Err(Error::InvalidConfig("eval_interval and minibatches must be >= 1".into()));
        }
        if let Some(b) = self.prompts_per_batch {
            if b == 0 || b > num_prompts {
                return Err(Error::InvalidConfig(format!("prompts_per_batch must be in 1..={num_prompts}, got {b}")));
            }
        }
        Optimizer::new(self.update).map(|_| ())
    }
}

pub const ONLINE_COLUMNS: [&str; 7] = [
    "proxy_reward",
    "gold_reward",
    "entropy_bonus",
    "kl_ref",
    "kl_consec",
    "clip_frac",
    "win_rate",
];

fn expected_reward(policy: &PolicyTable, r: &RewardFn) -> f64 {
    let env = policy.env();
    let total: f64 = env
        .prompts()
        .map(|x| {
            policy
                .sequence_log_probs(x)
                .iter()
                .zip(r.prompt_values(x))
                .map(|(lp, v)| lp.exp() * v)
                .sum::<f64>()
        })
        .sum();
    total / env.num_prompts() as f64
}

/// Sampled response indices and shaped rewards for one prompt.
pub type SampleGroup = (PromptId, Vec<usize>, Vec<f64>);

/// RLOO-scored batch ordered slot-major: every sample slot `j` lists all
/// prompts before slot `j + 1`, so contiguous minibatch slices each see every prompt.
pub fn slot_major_batch(groups: &[SampleGroup]) -> Result<Vec<OnlineSample>> {
    let k = groups.first().map(|g| g.1.len()).ok_or(Error::EmptyBatch)?;
    let advantages = groups.iter().map(|(_, _, r)| rloo_advantages(r)).collect::<Result<Vec<_>>>()?;
    let mut batch = Vec::with_capacity(groups.len() * k);
    for j in 0..k {
        for ((x, idx, _), a) in groups.iter().zip(&advantages) {
            batch.push(OnlineSample { prompt: *x, index: idx[j], advantage: a[j] });
        }
    }
    Ok(batch)
}

/// Samples `k` responses for each prompt from `snapshot` with the rng keyed by
/// `(seed, step, prompt)`, and scores them with the shaped reward.
#[allow(clippy::too_many_arguments)]
pub fn sample_groups(
    snapshot: &PolicyTable,
    reference: &PolicyTable,
    proxy: &RewardFn,
    shaping: &ShapingConfig,
    prompts: &[PromptId],
    k: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<SampleGroup>> {
    let env = snapshot.env();
    prompts
        .par_iter()
        .map(|&x| {
            let mut rng = rng_from(seed, &[stream::ONLINE_SAMPLING, step, x.0 as u64]);
            let idx: Vec<usize> = (0..k).map(|_| snapshot.sample_index(x, &mut rng)).collect();
            let rewards = idx
                .iter()
                .map(|&i| {
                    shaped_value(
                        proxy.get(x, i),
                        snapshot.log_prob_index(x, i),
                        Some(reference.log_prob_index(x, i)),
                        env.response_len(i),
                        shaping,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((x, idx, rewards))
        })
        .collect()
}

/// RLOO with one clipped update per sampled batch.
///
/// Row `t` logs the policy after update `t`: exact expected proxy and gold
/// rewards, exact `KL(π_t‖π_ref)` and `KL(π_t‖π_{t−1})`, the entropy bonus of
/// the step's samples under the sampling policy, the clip fraction, and the
/// win rate (re-evaluated every `eval_interval` steps and at the end, carried
/// forward otherwise). After training the overoptimization detector runs with
/// default settings and its onset is stored on the metrics.
#[allow(clippy::too_many_arguments)]
pub fn train_online(
    policy0: &PolicyTable,
    reference: &PolicyTable,
    proxy: &RewardFn,
    gold: &RewardFn,
    shaping: &ShapingConfig,
    rloo: &RlooConfig,
    seed: u64,
    eval: &WinRateEval,
) -> Result<(PolicyTable, RunMetrics)> {
    let env = policy0.env().clone();
    shaping.validate()?;
    rloo.validate(env.num_prompts())?;
    if !reference.env().same_env(&env) {
        return Err(Error::EnvMismatch);
    }
    proxy.check_env(&env)?;
    gold.check_env(&env)?;
    let mut opt = Optimizer::new(rloo.update)?;

    let mut metrics = RunMetrics::new(&ONLINE_COLUMNS);
    metrics.set_meta("mode", shaping.mode.name());
    metrics.set_meta("beta", shaping.beta);
    metrics.set_meta("entropy_bonus_beta", shaping.bonus_beta());
    metrics.set_meta("seed", seed);
    let mut policy = policy0.clone();
    if rloo.steps == 0 {
        return Ok((policy, metrics));
    }
    let per_batch = rloo.prompts_per_batch.unwrap_or(env.num_prompts());
    let mut win = eval.evaluate(&policy)?;
    for step in 1..=rloo.steps {
        let offset = ((step - 1) as usize * per_batch) % env.num_prompts();
        let prompts: Vec<PromptId> = (0..per_batch).map(|i| PromptId((offset + i) % env.num_prompts())).collect();
        let snapshot = policy.clone();
        let groups = sample_groups(&snapshot, reference, proxy, shaping, &prompts, rloo.k, seed, step)?;

        let samples: Vec<(PromptId, usize)> =
            groups.iter().flat_map(|(x, idx, _)| idx.iter().map(move |&i| (*x, i))).collect();
        let batch = slot_major_batch(&groups)?;

        let stats = ppo_clip_step(&mut policy, &snapshot, &batch, rloo.clip_eps, rloo.minibatches, &mut opt)?;
        let bonus = entropy_bonus(&snapshot, &samples, shaping.bonus_beta())?;
        if step % rloo.eval_interval == 0 || step == rloo.steps {
            win = eval.evaluate(&policy)?;
        }
        metrics.push(
            step,
            vec![
                expected_reward(&policy, proxy),
                expected_reward(&policy, gold),
                bonus,
                mean_kl_exact(&policy, reference)?,
                mean_kl_exact(&policy, &snapshot)?,
                stats.clip_frac,
                win,
            ],
        )?;
    }
    let delta = default_overopt_delta(&metrics)?;
    metrics.overopt_onset = detect_overoptimization(&metrics, DEFAULT_OVEROPT_WINDOW, delta)?;
    if let Some(c) = entropy_gap_correlation(&metrics)? {
        metrics.set_meta("entropy_gap_correlation", c);
    }
    Ok((policy, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, make_reference_policy, EnvConfig, GoldConfig, GoldReward, TokenEnv};
    use crate::metrics::greedy_responses;
    use crate::policy::kl_exact;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn env(v: usize, l: usize, p: usize) -> Arc<TokenEnv> {
        build_env(EnvConfig::new(v, l, p, 0)).unwrap()
    }

    fn random_policy(e: &Arc<TokenEnv>, seed: u64, scale: f64) -> PolicyTable {
        let mut p = PolicyTable::uniform(e);
        let mut rng = rng_from(seed, &[97]);
        p.perturb_logits(|| scale * rng.sample::<f64, _>(StandardNormal));
        p
    }

    fn cfg(mode: ShapingMode, beta: f64) -> ShapingConfig {
        ShapingConfig { mode, beta }
    }

    #[test]
    fn shaped_reward_examples() {
        let e = env(4, 4, 2);
        let proxy = RewardFn::from_fn(&e, "proxy", |x, i, _| 0.1 * i as f64 - x.0 as f64);
        let p = random_policy(&e, 1, 1.0);
        let r = random_policy(&e, 2, 1.0);
        let y = Response::new(vec![0, 1, 2, 0]);
        let x = PromptId(1);
        let base = proxy.eval(&e, x, &y).unwrap();
        assert_eq!(shaped_reward(&proxy, &p, Some(&r), x, &y, &cfg(ShapingMode::None, 7.0)).unwrap(), base);
        assert_eq!(shaped_reward(&proxy, &p, Some(&p), x, &y, &cfg(ShapingMode::KlConstrained, 3.0)).unwrap(), base);
        assert_eq!(
            shaped_reward(&proxy, &p, None, x, &y, &cfg(ShapingMode::KlConstrained, 3.0)).unwrap_err(),
            Error::MissingReference
        );
        let lp = p.log_prob(x, &y).unwrap();
        let me = shaped_reward(&proxy, &p, None, x, &y, &cfg(ShapingMode::Maxent, 2.0)).unwrap();
        assert!((me - (base - 0.5 * lp)).abs() < 1e-12);
        let mi = shaped_reward(&proxy, &p, None, x, &y, &cfg(ShapingMode::Minent, 2.0)).unwrap();
        assert!((mi - (base + 0.5 * lp)).abs() < 1e-12);
        assert!(shaped_reward(&proxy, &p, None, x, &y, &cfg(ShapingMode::Maxent, -1.0)).is_err());
    }

    #[test]
    fn maxent_scalar_example() {
        // β=2, |y|=4, log π(y|x) = −3 gives r + 1.5
        let v = shaped_value(0.25, -3.0, None, 4, &cfg(ShapingMode::Maxent, 2.0)).unwrap();
        assert!((v - 1.75).abs() < 1e-15);
    }

    #[test]
    fn rloo_examples() {
        assert_eq!(rloo_advantages(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(rloo_advantages(&[2.0, 0.0]).unwrap(), vec![2.0, -2.0]);
        assert_eq!(rloo_advantages(&[1.0]).unwrap_err(), Error::TooFewSamples(1));
        let a = rloo_advantages(&[3.0, -1.0, 0.5, 2.0]).unwrap();
        // direct leave-one-out
        let r = [3.0, -1.0, 0.5, 2.0];
        for i in 0..4 {
            let others: f64 = (0..4).filter(|&j| j != i).map(|j| r[j]).sum::<f64>() / 3.0;
            assert!((a[i] - (r[i] - others)).abs() < 1e-12);
        }
    }

    #[test]
    fn rloo_zero_mean_on_random_vectors() {
        let mut rng = rng_from(3, &[1]);
        for _ in 0..1000 {
            let k = rng.random_range(2..12);
            let r: Vec<f64> = (0..k).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            assert!(mean(&rloo_advantages(&r).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let e = env(3, 3, 2);
        let mut p = random_policy(&e, 4, 1.0);
        let before = p.clone();
        let batch: Vec<OnlineSample> = (0..6).map(|i| OnlineSample { prompt: PromptId(i % 2), index: i, advantage: 0.0 }).collect();
        let mut opt = Optimizer::new(UpdateRule::Plain { step: 1.0 }).unwrap();
        ppo_clip_step(&mut p, &before, &batch, 0.2, 3, &mut opt).unwrap();
        assert_eq!(p.logits(), before.logits());
    }

    #[test]
    fn positive_advantage_raises_log_prob() {
        let e = env(3, 3, 1);
        let mut p = random_policy(&e, 5, 1.0);
        let snap = p.clone();
        let item = OnlineSample { prompt: PromptId(0), index: 9, advantage: 0.7 };
        let mut opt = Optimizer::new(UpdateRule::Plain { step: 0.1 }).unwrap();
        ppo_clip_step(&mut p, &snap, &[item], 0.2, 1, &mut opt).unwrap();
        assert!(p.log_prob_index(PromptId(0), 9) > snap.log_prob_index(PromptId(0), 9));
        let other = PolicyTable::uniform(&env(4, 3, 1));
        assert_eq!(ppo_clip_step(&mut p, &other, &[item], 0.2, 1, &mut opt).unwrap_err(), Error::SnapshotMismatch);
    }

    #[test]
    fn surrogate_gradient_at_unit_ratio_is_policy_gradient() {
        // two responses: the end token alone, or the single non-end token
        let e = env(2, 1, 1);
        assert_eq!(e.num_responses(), 2);
        let p = random_policy(&e, 6, 1.0);
        let batch = [
            OnlineSample { prompt: PromptId(0), index: 0, advantage: 1.5 },
            OnlineSample { prompt: PromptId(0), index: 1, advantage: -0.5 },
            OnlineSample { prompt: PromptId(0), index: 1, advantage: 0.25 },
        ];
        let (g, clipped) = clipped_surrogate_grad(&p, &p, &batch, 0.2).unwrap();
        assert_eq!(clipped, 0);
        // analytic: ∇ log π(a) = onehot(a) − π over the single root row
        let probs: Vec<f64> = p.conditional_log_probs(PromptId(0), 0).iter().map(|l| l.exp()).collect();
        let tok = |i: usize| e.response_at(i).tokens[0] as usize;
        let mut want = [0.0; 2];
        for s in &batch {
            for a in 0..2 {
                want[a] += s.advantage * ((tok(s.index) == a) as u8 as f64 - probs[a]) / 3.0;
            }
        }
        for a in 0..2 {
            assert!((g.values()[a] - want[a]).abs() < 1e-14);
        }
        let pg = policy_gradient_estimate(&p, &batch).unwrap();
        assert_eq!(pg.values(), g.values());
    }

    #[test]
    fn rloo_estimator_matches_exact_gradient() {
        let e = env(3, 2, 1);
        let p = random_policy(&e, 7, 0.8);
        let proxy = RewardFn::from_fn(&e, "proxy", |_, i, _| (i as f64 * 1.3).sin());
        let shaping = cfg(ShapingMode::Maxent, 0.3);
        let shaped = RewardFn::from_fn(&e, "shaped", |x, _, y| shaped_reward(&proxy, &p, None, x, y, &shaping).unwrap());
        let exact = exact_policy_gradient(&p, &shaped).unwrap();

        let n = 100_000;
        let dim = exact.values().len();
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut rng = rng_from(8, &[2]);
        for _ in 0..n {
            let idx: Vec<usize> = (0..4).map(|_| p.sample_index(PromptId(0), &mut rng)).collect();
            let r: Vec<f64> = idx.iter().map(|&i| shaped.get(PromptId(0), i)).collect();
            let batch: Vec<OnlineSample> = idx
                .iter()
                .zip(rloo_advantages(&r).unwrap())
                .map(|(&index, advantage)| OnlineSample { prompt: PromptId(0), index, advantage })
                .collect();
            let g = policy_gradient_estimate(&p, &batch).unwrap();
            for (j, v) in g.values().iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        for j in 0..dim {
            let m = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!((m - exact.values()[j]).abs() <= 4.0 * se + 1e-15, "coord {j}: {m} vs {} (se {se})", exact.values()[j]);
        }
    }

    fn online_setup(seed: u64) -> (Arc<TokenEnv>, PolicyTable, RewardFn, RewardFn, WinRateEval) {
        let e = env(4, 3, 4);
        let gold = GoldReward::seeded(&e, GoldConfig { seed, ..Default::default() }).unwrap();
        let sft = make_reference_policy(&e, &gold, 4.0, 0.5, seed).unwrap();
        let proxy_w = GoldReward::seeded(&e, GoldConfig { seed: seed + 1000, ..Default::default() }).unwrap();
        let g = gold.table(&e);
        let proxy = RewardFn::from_fn(&e, "proxy", |x, i, _| 0.7 * g.get(x, i) + 0.3 * proxy_w.table(&e).get(x, i));
        let eval = WinRateEval { gold: g.clone(), references: greedy_responses(&sft) };
        (e, sft, proxy, g, eval)
    }

    #[test]
    fn clipping_engages_only_with_several_slices() {
        let (e, sft, proxy, _, _) = online_setup(1);
        for seed in 0..8 {
            let shaping = cfg(ShapingMode::None, 0.0);
            let groups = sample_groups(&sft, &sft, &proxy, &shaping, &e.prompts().collect::<Vec<_>>(), 4, seed, 1).unwrap();
            let batch = slot_major_batch(&groups).unwrap();
            let one_slice = |eps| {
                let mut p = sft.clone();
                let mut opt = Optimizer::new(UpdateRule::Plain { step: 2.0 }).unwrap();
                let stats = ppo_clip_step(&mut p, &sft, &batch, eps, 1, &mut opt).unwrap();
                assert_eq!(stats.clipped, 0);
                p
            };
            assert_eq!(one_slice(0.2).logits(), one_slice(1e-4).logits());
            let mut p = sft.clone();
            let mut opt = Optimizer::new(UpdateRule::Plain { step: 2.0 }).unwrap();
            let stats = ppo_clip_step(&mut p, &sft, &batch, 1e-4, 4, &mut opt).unwrap();
            assert!(stats.clipped > 0, "seed {seed}: nothing clipped");
            assert_eq!(stats.items, batch.len());
        }
    }

    #[test]
    fn slot_major_slices_cover_every_prompt() {
        let (e, sft, proxy, _, _) = online_setup(3);
        let shaping = cfg(ShapingMode::None, 0.0);
        let groups = sample_groups(&sft, &sft, &proxy, &shaping, &e.prompts().collect::<Vec<_>>(), 4, 0, 1).unwrap();
        let batch = slot_major_batch(&groups).unwrap();
        for slice in batch.chunks(e.num_prompts()) {
            let prompts: Vec<usize> = slice.iter().map(|s| s.prompt.0).collect();
            assert_eq!(prompts, (0..e.num_prompts()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn penalty_cancels_at_reference() {
        let (e, sft, proxy, _, _) = online_setup(2);
        let prompts: Vec<PromptId> = e.prompts().collect();
        let a = sample_groups(&sft, &sft, &proxy, &cfg(ShapingMode::KlConstrained, 0.8), &prompts, 4, 3, 1).unwrap();
        let b = sample_groups(&sft, &sft, &proxy, &cfg(ShapingMode::None, 0.0), &prompts, 4, 3, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_and_validation() {
        let (_, sft, proxy, gold, eval) = online_setup(3);
        let rloo = RlooConfig { steps: 0, ..Default::default() };
        let (p, m) = train_online(&sft, &sft, &proxy, &gold, &cfg(ShapingMode::Maxent, 0.1), &rloo, 1, &eval).unwrap();
        assert_eq!(p.logits(), sft.logits());
        assert!(m.is_empty());
        let bad = RlooConfig { k: 1, ..Default::default() };
        assert_eq!(
            train_online(&sft, &sft, &proxy, &gold, &cfg(ShapingMode::Maxent, 0.1), &bad, 1, &eval).unwrap_err(),
            Error::TooFewSamples(1)
        );
        let bad = RlooConfig { clip_eps: 1.5, ..Default::default() };
        assert!(train_online(&sft, &sft, &proxy, &gold, &cfg(ShapingMode::Maxent, 0.1), &bad, 1, &eval).is_err());
    }

    #[test]
    fn runs_are_deterministic_and_well_formed() {
        let (_, sft, proxy, gold, eval) = online_setup(4);
        let rloo = RlooConfig { steps: 25, ..Default::default() };
        let shaping = cfg(ShapingMode::Maxent, 0.1);
        let (p1, m1) = train_online(&sft, &sft, &proxy, &gold, &shaping, &rloo, 9, &eval).unwrap();
        let (p2, m2) = train_online(&sft, &sft, &proxy, &gold, &shaping, &rloo, 9, &eval).unwrap();
        assert_eq!(m1.to_csv(), m2.to_csv());
        assert_eq!(p1.logits(), p2.logits());
        assert_eq!(m1.len(), 25);
        for v in m1.column("entropy_bonus").unwrap() {
            assert!(v >= 0.0);
        }
        let kl = m1.column("kl_ref").unwrap();
        assert!((kl.last().unwrap() - kl_exact_mean(&p1, &sft)).abs() < 1e-15);
        assert!(m1.metadata.contains_key("entropy_gap_correlation"));
    }

    fn kl_exact_mean(p: &PolicyTable, q: &PolicyTable) -> f64 {
        let e = p.env();
        e.prompts().map(|x| kl_exact(p, q, x).unwrap()).sum::<f64>() / e.num_prompts() as f64
    }

    #[test]
    fn strong_kl_penalty_keeps_policy_closer() {
        let (_, sft, proxy, gold, eval) = online_setup(5);
        let rloo = RlooConfig { steps: 40, update: UpdateRule::Plain { step: 0.05 }, ..Default::default() };
        let run = |beta| {
            let (_, m) = train_online(&sft, &sft, &proxy, &gold, &cfg(ShapingMode::KlConstrained, beta), &rloo, 11, &eval).unwrap();
            *m.column("kl_ref").unwrap().last().unwrap()
        };
        assert!(run(10.0) < run(0.01));
    }
}
