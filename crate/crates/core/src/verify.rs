//! Executable derivation battery and the numerical oracles it shares with tests.
//!
//! Each check runs a seeded case generator over a number of seeds and records
//! the worst observed error against a fixed tolerance.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{build_env, EnvConfig, PreferenceDataset, PreferencePair, PromptId, RankedItem, TokenEnv};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid};
use crate::maxent::{
    canonical_projection, check_class_invariance_with, objective_of_distribution, optimal_policy_closed_form,
    reward_from_policy, Projection, RewardFn, Temperature,
};
use crate::offline::{
    dpo_grad, dpo_loss, pl_simpo_grad, pl_simpo_loss, simpo_grad, simpo_loss, simpo_population_grad, DpoConfig,
    SimpoConfig,
};
use crate::policy::{GradientTable, PolicyTable};
use crate::pref::{bt_prob, pl_prob, sample_ranking, Permutation, Ranking};
use crate::rng::{rng_from, Rng as ChaRng};

/// Denominator floor for relative gradient error. Central differences at
/// `h = 1e-5` carry roundoff near `1e-11 · |loss|`, so entries far below this
/// floor are effectively compared on absolute error.
pub const FD_REL_FLOOR: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

/// Central finite differences of `loss` at every logit, compared to `grad`.
///
/// Relative error is `|a − n| / max(|a|, |n|, FD_REL_FLOOR)`. Entries where
/// both sides are exactly zero are skipped.
pub fn fd_check(
    policy: &PolicyTable,
    grad: &GradientTable,
    h: f64,
    loss: impl Fn(&PolicyTable) -> Result<f64>,
) -> Result<GradCheck> {
    if grad.values().len() != policy.logits().len() {
        return Err(Error::EnvMismatch);
    }
    let mut probe = policy.clone();
    let mut out = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, entries: 0 };
    for (i, &a) in grad.values().iter().enumerate() {
        let x0 = policy.logits()[i];
        probe.logits_mut()[i] = x0 + h;
        let up = loss(&probe)?;
        probe.logits_mut()[i] = x0 - h;
        let down = loss(&probe)?;
        probe.logits_mut()[i] = x0;
        let num = (up - down) / (2.0 * h);
        if a == 0.0 && num == 0.0 {
            continue;
        }
        let abs = (a - num).abs();
        out.max_abs_err = out.max_abs_err.max(abs);
        out.max_rel_err = out.max_rel_err.max(abs / a.abs().max(num.abs()).max(FD_REL_FLOOR));
        out.entries += 1;
    }
    Ok(out)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Best `Σ p r + α H(p)` found by projected-gradient ascent with Armijo
/// backtracking from the uniform point and `restarts` random starts.
pub fn simplex_ascent_objective(rewards: &[f64], alpha: f64, restarts: usize, iters: usize, rng: &mut ChaRng) -> f64 {
    let n = rewards.len();
    let objective = |p: &[f64]| objective_of_distribution(rewards, p, alpha);
    let mut best = f64::NEG_INFINITY;
    for start in 0..=restarts {
        let mut p: Vec<f64> = if start == 0 {
            vec![1.0 / n as f64; n]
        } else {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let mut f = objective(&p);
        let mut step = 1.0;
        for _ in 0..iters {
            let g: Vec<f64> = p
                .iter()
                .zip(rewards)
                .map(|(pi, r)| r - alpha * (pi.max(1e-300).ln() + 1.0))
                .collect();
            let mut accepted = false;
            let mut t = step;
            for _ in 0..60 {
                let trial: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi + t * gi).collect();
                let q = project_to_simplex(&trial);
                let fq = objective(&q);
                let ascent: f64 = g.iter().zip(q.iter().zip(&p)).map(|(gi, (qi, pi))| gi * (qi - pi)).sum();
                if fq >= f + 1e-4 * ascent && fq >= f {
                    p = q;
                    f = fq;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            step = (t * 2.0).min(1e3);
        }
        best = best.max(f);
    }
    best
}

/// All permutations of `0..k` in lexicographic order.
pub fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn normal(rng: &mut ChaRng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Seeded `(env, reward, α)` instance for the closed-form checks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub env: Arc<TokenEnv>,
    pub reward: RewardFn,
    pub alpha: f64,
}

/// Small random instance: V in 2..=4, L in 1..=3, one to three prompts.
pub fn small_instance(seed: u64) -> Result<Instance> {
    let mut rng = rng_from(seed, &[0xc4ec5]);
    let v = rng.random_range(2..=4);
    let l = rng.random_range(1..=3);
    let p = rng.random_range(1..=3);
    instance_with(&mut rng, EnvConfig::new(v, l, p, seed))
}

/// Random instance whose response space is at most `max_responses`.
pub fn sized_instance(seed: u64, max_responses: usize) -> Result<Instance> {
    let mut rng = rng_from(seed, &[0x512ed]);
    let shapes: Vec<(usize, usize)> = (2..=8)
        .flat_map(|v| (1..=9).map(move |l| (v, l)))
        .filter(|&(v, l)| {
            let n = crate::env::response_space_size(v, l);
            n >= 2 && n <= max_responses as u128
        })
        .collect();
    let (v, l) = shapes[rng.random_range(0..shapes.len())];
    let p = rng.random_range(1..=2);
    instance_with(&mut rng, EnvConfig::new(v, l, p, seed))
}

fn instance_with(rng: &mut ChaRng, cfg: EnvConfig) -> Result<Instance> {
    let env = build_env(cfg)?;
    let scale = 0.5 + 2.5 * rng.random::<f64>();
    let alpha = 0.2 + 2.8 * rng.random::<f64>();
    let reward = RewardFn::from_fn(&env, "random", |_, _, _| scale * normal(rng));
    Ok(Instance { env, reward, alpha })
}

fn random_shift(env: &TokenEnv, rng: &mut ChaRng) -> RewardFn {
    let f: Vec<f64> = (0..env.num_prompts()).map(|_| 3.0 * normal(rng)).collect();
    RewardFn::from_fn(env, "shift", |x, _, _| f[x.0])
}

fn random_policy(env: &Arc<TokenEnv>, rng: &mut ChaRng, scale: f64) -> PolicyTable {
    let n = PolicyTable::uniform(env).logits().len();
    let logits = (0..n).map(|_| scale * normal(rng)).collect();
    PolicyTable::from_logits(env, logits).expect("finite logits")
}

fn random_pairs(env: &TokenEnv, rng: &mut ChaRng, n: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| PreferencePair {
            prompt: PromptId(rng.random_range(0..env.num_prompts())),
            chosen: env.response_at(rng.random_range(0..env.num_responses())),
            rejected: env.response_at(rng.random_range(0..env.num_responses())),
        })
        .collect()
}

fn random_rankings(env: &TokenEnv, rng: &mut ChaRng, n: usize) -> Result<Vec<RankedItem>> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(2..=4);
            let candidates: Vec<_> = (0..k).map(|_| env.response_at(rng.random_range(0..env.num_responses()))).collect();
            let scores: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
            Ok(RankedItem {
                prompt: PromptId(rng.random_range(0..env.num_prompts())),
                ranking: Ranking { candidates, order: sample_ranking(&scores, rng)? },
            })
        })
        .collect()
}

fn grad_env(rng: &mut ChaRng, seed: u64) -> Result<Arc<TokenEnv>> {
    let v = rng.random_range(2..=4);
    let l = rng.random_range(2..=3);
    build_env(EnvConfig::new(v, l, 2, seed))
}

/// Closed-form optimum versus the simplex-ascent oracle: returns
/// `max(0, oracle − closed_form)` over prompts.
pub fn optimality_gap_case(inst: &Instance, restarts: usize, iters: usize, seed: u64) -> Result<f64> {
    let (pi, _) = optimal_policy_closed_form(&inst.env, &inst.reward, Temperature::Constant(inst.alpha))?;
    let mut rng = rng_from(seed, &[0x0acc1e]);
    let mut gap: f64 = 0.0;
    for x in inst.env.prompts() {
        let probs: Vec<f64> = pi.sequence_log_probs(x).iter().map(|l| l.exp()).collect();
        let closed = objective_of_distribution(inst.reward.prompt_values(x), &probs, inst.alpha);
        let oracle = simplex_ascent_objective(inst.reward.prompt_values(x), inst.alpha, restarts, iters, &mut rng);
        gap = gap.max(oracle - closed);
    }
    Ok(gap.max(0.0))
}

/// `|σ(Δ r̂) − σ(Δ r̂_Z)|` maximized over random pairs, where `r̂` is the
/// reward recovered from the optimal policy with and without `log Z`.
pub fn z_cancellation_case(inst: &Instance, pairs: usize, seed: u64) -> Result<f64> {
    let (pi, z) = optimal_policy_closed_form(&inst.env, &inst.reward, Temperature::Constant(inst.alpha))?;
    let with_z = reward_from_policy(&pi, inst.alpha, Some(&z))?;
    let without = reward_from_policy(&pi, inst.alpha, None)?;
    let mut rng = rng_from(seed, &[0x2ca]);
    let n = inst.env.num_responses();
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = PromptId(rng.random_range(0..inst.env.num_prompts()));
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let p1 = bt_prob(with_z.get(x, a), with_z.get(x, b))?;
        let p2 = bt_prob(without.get(x, a), without.get(x, b))?;
        worst = worst.max((p1 - p2).abs());
    }
    Ok(worst)
}

fn simpo_gradient_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0x51a0]);
    let env = grad_env(&mut rng, seed)?;
    let p = random_policy(&env, &mut rng, 1.0);
    let batch = random_pairs(&env, &mut rng, 6);
    let cfg = SimpoConfig {
        beta: 0.3 + 2.0 * rng.random::<f64>(),
        gamma: rng.random::<f64>(),
        length_normalized: rng.random::<bool>(),
    };
    let g = simpo_grad(&p, &batch, &cfg)?;
    Ok(fd_check(&p, &g, FD_STEP, |q| simpo_loss(q, &batch, &cfg))?.max_rel_err)
}

fn dpo_gradient_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0xd90]);
    let env = grad_env(&mut rng, seed)?;
    let p = random_policy(&env, &mut rng, 1.0);
    let reference = random_policy(&env, &mut rng, 1.0);
    let batch = random_pairs(&env, &mut rng, 6);
    let cfg = DpoConfig { beta: 0.1 + 2.0 * rng.random::<f64>(), reference };
    let g = dpo_grad(&p, &batch, &cfg)?;
    Ok(fd_check(&p, &g, FD_STEP, |q| dpo_loss(q, &batch, &cfg))?.max_rel_err)
}

fn pl_gradient_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0x91]);
    let env = grad_env(&mut rng, seed)?;
    let p = random_policy(&env, &mut rng, 1.0);
    let batch = random_rankings(&env, &mut rng, 5)?;
    let alpha = 0.2 + 2.0 * rng.random::<f64>();
    let g = pl_simpo_grad(&p, &batch, alpha)?;
    Ok(fd_check(&p, &g, FD_STEP, |q| pl_simpo_loss(q, &batch, alpha))?.max_rel_err)
}

/// Analytic-vs-numeric relative gradient error for one seeded case.
pub fn gradient_case(loss: GradientLoss, seed: u64) -> Result<f64> {
    match loss {
        GradientLoss::Simpo => simpo_gradient_case(seed),
        GradientLoss::Dpo => dpo_gradient_case(seed),
        GradientLoss::PlSimpo => pl_gradient_case(seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientLoss {
    Simpo,
    Dpo,
    PlSimpo,
}

/// Norm of the population SimPO gradient at the MaxEnt optimum on V=3, L=2
/// with constant α and γ = 0.
pub fn population_stationarity_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0x9095]);
    let env = build_env(EnvConfig::new(3, 2, 2, seed))?;
    let alpha = 0.2 + 2.0 * rng.random::<f64>();
    let r = RewardFn::from_fn(&env, "target", |_, _, _| 2.0 * normal(&mut rng));
    let (star, _) = optimal_policy_closed_form(&env, &r, Temperature::Constant(alpha))?;
    let sampler = random_policy(&env, &mut rng, 1.0);
    let cfg = SimpoConfig { beta: alpha, gamma: 0.0, length_normalized: false };
    Ok(simpo_population_grad(&star, &sampler, &r, &cfg)?.norm())
}

pub fn pl_normalization_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0x91a0]);
    let mut worst: f64 = 0.0;
    for k in 2..=6 {
        let r: Vec<f64> = (0..k).map(|_| 2.0 * normal(&mut rng)).collect();
        let mut total = 0.0;
        for perm in all_permutations(k) {
            total += pl_prob(&r, &Permutation::new(perm)?)?;
        }
        worst = worst.max((total - 1.0).abs());
    }
    Ok(worst)
}

pub fn pl_bt_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0xb7]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let r = [3.0 * normal(&mut rng), 3.0 * normal(&mut rng)];
        let pl = pl_prob(&r, &Permutation::identity(2))?;
        worst = worst.max((pl - bt_prob(r[0], r[1])?).abs());
    }
    Ok(worst)
}

pub fn bt_shift_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0x5f]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b, c) = (3.0 * normal(&mut rng), 3.0 * normal(&mut rng), 5.0 * normal(&mut rng));
        worst = worst.max((bt_prob(a, b)? - bt_prob(a + c, b + c)?).abs());
        worst = worst.max((bt_prob(a, b)? - sigmoid(a - b)).abs());
    }
    Ok(worst)
}

pub fn dpo_simpo_relation_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0xd5]);
    let env = build_env(EnvConfig::new(4, 3, 2, seed))?;
    let p = random_policy(&env, &mut rng, 1.0);
    let lmax = (0..env.num_responses()).map(|i| env.response_len(i)).max().unwrap_or(0);
    let len3: Vec<usize> = (0..env.num_responses()).filter(|&i| env.response_len(i) == lmax).collect();
    let batch: Vec<PreferencePair> = (0..8)
        .map(|_| PreferencePair {
            prompt: PromptId(rng.random_range(0..2)),
            chosen: env.response_at(len3[rng.random_range(0..len3.len())]),
            rejected: env.response_at(len3[rng.random_range(0..len3.len())]),
        })
        .collect();
    let beta = 0.1 + 2.0 * rng.random::<f64>();
    let dpo = dpo_loss(&p, &batch, &DpoConfig { beta, reference: PolicyTable::uniform(&env) })?;
    let simpo = simpo_loss(&p, &batch, &SimpoConfig { beta, gamma: 0.0, length_normalized: false })?;
    Ok((dpo - simpo).abs())
}

pub fn pl_reduction_case(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[0x92]);
    let env = grad_env(&mut rng, seed)?;
    let p = random_policy(&env, &mut rng, 1.0);
    let pairs = random_pairs(&env, &mut rng, 8);
    let alpha = 0.2 + 2.0 * rng.random::<f64>();
    let ranked = PreferenceDataset { pairs: pairs.clone(), rankings: vec![] }.as_rankings();
    let pl = pl_simpo_loss(&p, &ranked, alpha)?;
    let simpo = simpo_loss(&p, &pairs, &SimpoConfig { beta: alpha, gamma: 0.0, length_normalized: false })?;
    Ok((pl - simpo).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl VerifyLevel {
    pub fn seeds(&self) -> u64 {
        match self {
            VerifyLevel::Fast => 5,
            VerifyLevel::Full => 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Worst error over all cases; infinite when a case errored.
    pub observed: f64,
    pub tolerance: f64,
    pub cases: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    /// One line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {}.{} observed={:.3e} tol={:.0e} cases={}{}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.observed,
                c.tolerance,
                c.cases,
                c.error.as_ref().map(|e| format!(" error={e}")).unwrap_or_default()
            ));
        }
        let failed = self.failures().len();
        out.push_str(&format!("{} checks, {} failed\n", self.checks.len(), failed));
        out
    }
}

fn run_check(
    suite: &'static str,
    name: &'static str,
    tolerance: f64,
    seeds: u64,
    mut case: impl FnMut(u64) -> Result<f64>,
) -> CheckResult {
    let mut observed: f64 = 0.0;
    let mut error = None;
    for seed in 0..seeds {
        match case(seed) {
            Ok(v) if v.is_finite() => observed = observed.max(v),
            Ok(v) => {
                observed = f64::INFINITY;
                error = Some(format!("seed {seed}: non-finite observation {v}"));
                break;
            }
            Err(e) => {
                observed = f64::INFINITY;
                error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    CheckResult {
        suite,
        name,
        passed: error.is_none() && observed <= tolerance,
        observed,
        tolerance,
        cases: seeds,
        error,
    }
}

pub fn run_verify(level: VerifyLevel) -> VerifyReport {
    run_verify_with(level, &canonical_projection)
}

/// The battery with a caller-supplied projection operator, so that a
/// corrupted projection can be shown to be caught.
pub fn run_verify_with(level: VerifyLevel, project: Projection<'_>) -> VerifyReport {
    let n = level.seeds();
    let mut checks = Vec::new();
    let m = "maxent_core";

    checks.push(run_check(m, "closed_form_normalization", 1e-9, n, |s| {
        let inst = small_instance(s)?;
        let (pi, _) = optimal_policy_closed_form(&inst.env, &inst.reward, Temperature::Constant(inst.alpha))?;
        Ok(inst
            .env
            .prompts()
            .map(|x| (log_sum_exp(&pi.sequence_log_probs(x)).exp() - 1.0).abs())
            .fold(0.0, f64::max))
    }));
    checks.push(run_check(m, "closed_form_optimality", 1e-6, n, |s| {
        optimality_gap_case(&small_instance(s)?, 3, 200, s)
    }));
    checks.push(run_check(m, "z_cancellation", 1e-12, n, |s| z_cancellation_case(&small_instance(s)?, 200, s)));
    checks.push(run_check(m, "reward_round_trip", 1e-9, n, |s| {
        let inst = small_instance(s)?;
        let (pi, z) = optimal_policy_closed_form(&inst.env, &inst.reward, Temperature::Constant(inst.alpha))?;
        Ok(reward_from_policy(&pi, inst.alpha, Some(&z))?.max_abs_diff(&inst.reward))
    }));
    let class = |s: u64| -> Result<crate::maxent::ClassInvarianceReport> {
        let inst = small_instance(s)?;
        let mut rng = rng_from(s, &[0x5417]);
        let shift = random_shift(&inst.env, &mut rng);
        check_class_invariance_with(&inst.env, &inst.reward, &shift, inst.alpha, s, project)
    };
    checks.push(run_check(m, "lemma1_preference_invariance", 1e-9, n, |s| Ok(class(s)?.preference_gap)));
    checks.push(run_check(m, "lemma2_policy_invariance", 1e-9, n, |s| Ok(class(s)?.policy_tv)));
    checks.push(run_check(m, "proposition1_uniqueness", 1e-9, n, |s| Ok(class(s)?.uniqueness_gap)));
    checks.push(run_check(m, "projection_idempotence", 1e-9, n, |s| {
        let inst = small_instance(s)?;
        let once = project(&inst.reward, inst.alpha)?;
        Ok(project(&once, inst.alpha)?.max_abs_diff(&once))
    }));

    let p = "pref_models";
    checks.push(run_check(p, "pl_normalization", 1e-9, n, pl_normalization_case));
    checks.push(run_check(p, "pl_bt_reduction", 1e-12, n, pl_bt_case));
    checks.push(run_check(p, "bt_shift_invariance", 1e-12, n, bt_shift_case));

    let o = "offline_losses";
    checks.push(run_check(o, "simpo_gradient", 1e-5, n, simpo_gradient_case));
    checks.push(run_check(o, "dpo_gradient", 1e-5, n, dpo_gradient_case));
    checks.push(run_check(o, "pl_simpo_gradient", 1e-5, n, pl_gradient_case));
    checks.push(run_check(o, "population_stationarity", 1e-8, n, population_stationarity_case));
    checks.push(run_check(o, "dpo_simpo_relation", 1e-12, n, dpo_simpo_relation_case));
    checks.push(run_check(o, "pl_simpo_reduction", 1e-12, n, pl_reduction_case));

    VerifyReport { level, checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxent::log_partition;

    #[test]
    fn simplex_projection_properties() {
        let p = project_to_simplex(&[0.2, 0.3, 0.5]);
        assert_eq!(p, vec![0.2, 0.3, 0.5]);
        let p = project_to_simplex(&[5.0, -1.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 0.5]);
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn simplex_oracle_approaches_log_partition() {
        let mut rng = rng_from(1, &[1]);
        let r = [0.3, -1.2, 2.0, 0.0, 0.7];
        let alpha = 0.8;
        let best = simplex_ascent_objective(&r, alpha, 3, 500, &mut rng);
        let env = build_env(EnvConfig::new(5, 1, 1, 0)).unwrap();
        let rf = RewardFn::from_table(&env, "r", r.to_vec()).unwrap();
        let exact = alpha * log_partition(&rf, alpha).unwrap()[0];
        assert!(best <= exact + 1e-12);
        assert!(exact - best < 1e-6, "{exact} vs {best}");
    }

    #[test]
    fn permutations_are_complete() {
        assert_eq!(all_permutations(3).len(), 6);
        assert_eq!(all_permutations(6).len(), 720);
        assert_eq!(all_permutations(3)[1], vec![0, 2, 1]);
    }

    #[test]
    fn fast_battery_passes() {
        let report = run_verify(VerifyLevel::Fast);
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.checks.len(), 17);
    }

    #[test]
    fn corrupted_projection_is_named() {
        let corrupted = |r: &RewardFn, alpha: f64| -> Result<RewardFn> {
            let p = canonical_projection(r, alpha)?;
            Ok(p.map("corrupted", |_, _, v| v / alpha))
        };
        let report = run_verify_with(VerifyLevel::Fast, &corrupted);
        assert!(!report.passed());
        assert!(report.failures().contains(&"lemma1_preference_invariance"));
        assert!(report.render().contains("FAIL maxent_core.lemma1_preference_invariance"));
    }

    #[test]
    fn sized_instances_respect_cap() {
        for s in 0..20 {
            let inst = sized_instance(s, 5000).unwrap();
            assert!(inst.env.num_responses() <= 5000);
        }
    }
}
