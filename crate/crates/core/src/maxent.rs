//! Closed-form maximum-entropy machinery over the enumerable response space.
//!
//! The entropy-regularized objective `E_π[r] + α H(π)` is maximized by
//! `π(y|x) = exp(r(x,y)/α) / Z(x)`. The sequence-level optimum is realized as a
//! [`PolicyTable`] by backward aggregation: the logit of token `a` at prefix
//! `s` is the log-sum of `exp(r/α)` over every completion through `(s, a)`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{PromptId, Response, TokenEnv, Transition};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::policy::PolicyTable;
use crate::pref::{pl_log_prob, sample_ranking};
use crate::rng::rng_from;

/// A reward tabulated over every `(prompt, response index)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFn {
    pub id: String,
    num_prompts: usize,
    num_responses: usize,
    values: Vec<f64>,
}

impl RewardFn {
    pub fn from_fn(env: &TokenEnv, id: &str, mut f: impl FnMut(PromptId, usize, &Response) -> f64) -> Self {
        let mut values = Vec::with_capacity(env.num_prompts() * env.num_responses());
        let responses: Vec<Response> = (0..env.num_responses()).map(|i| env.response_at(i)).collect();
        for p in env.prompts() {
            for (i, y) in responses.iter().enumerate() {
                values.push(f(p, i, y));
            }
        }
        Self {
            id: id.to_string(),
            num_prompts: env.num_prompts(),
            num_responses: env.num_responses(),
            values,
        }
    }

    pub fn from_table(env: &TokenEnv, id: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != env.num_prompts() * env.num_responses() {
            return Err(Error::InvalidConfig(format!(
                "reward table has {} entries, env needs {}",
                values.len(),
                env.num_prompts() * env.num_responses()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reward `{id}`")));
        }
        Ok(Self {
            id: id.to_string(),
            num_prompts: env.num_prompts(),
            num_responses: env.num_responses(),
            values,
        })
    }

    pub fn constant(env: &TokenEnv, c: f64) -> Self {
        Self::from_fn(env, "constant", |_, _, _| c)
    }

    pub fn get(&self, prompt: PromptId, index: usize) -> f64 {
        self.values[prompt.0 * self.num_responses + index]
    }

    pub fn prompt_values(&self, prompt: PromptId) -> &[f64] {
        &self.values[prompt.0 * self.num_responses..(prompt.0 + 1) * self.num_responses]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn eval(&self, env: &TokenEnv, prompt: PromptId, response: &Response) -> Result<f64> {
        self.check_env(env)?;
        env.check_prompt(prompt)?;
        Ok(self.get(prompt, env.response_index(response)?))
    }

    pub fn check_env(&self, env: &TokenEnv) -> Result<()> {
        if self.num_prompts != env.num_prompts() || self.num_responses != env.num_responses() {
            return Err(Error::EnvMismatch);
        }
        Ok(())
    }

    pub fn map(&self, id: &str, f: impl Fn(PromptId, usize, f64) -> f64) -> Self {
        let n = self.num_responses;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(PromptId(k / n), k % n, v))
            .collect();
        Self {
            id: id.to_string(),
            num_prompts: self.num_prompts,
            num_responses: self.num_responses,
            values,
        }
    }

    pub fn max_abs_diff(&self, other: &RewardFn) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Temperature {
    Constant(f64),
    /// Effective temperature `beta / |y|` per response.
    LengthNormalized { beta: f64 },
}

impl Temperature {
    pub fn effective(&self, len: usize) -> f64 {
        match *self {
            Temperature::Constant(a) => a,
            Temperature::LengthNormalized { beta } => beta / len as f64,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            Temperature::Constant(a) => a,
            Temperature::LengthNormalized { beta } => beta,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositiveAlpha(v))
        }
    }
}

/// `log Z(x)` per prompt for the temperature it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTable {
    pub log_z: Vec<f64>,
    pub temperature: Temperature,
}

impl PartitionTable {
    pub fn z(&self, prompt: PromptId) -> f64 {
        self.log_z[prompt.0].exp()
    }
}

/// `r(x,y) / α(y)` for every response of `prompt`.
fn scaled_rewards(env: &TokenEnv, r: &RewardFn, temp: Temperature, prompt: PromptId) -> Vec<f64> {
    r.prompt_values(prompt)
        .iter()
        .enumerate()
        .map(|(i, v)| v / temp.effective(env.response_len(i)))
        .collect()
}

/// `π(y|x) ∝ exp(r(x,y)/α)`, realized as conditional softmaxes.
pub fn optimal_policy_closed_form(
    env: &Arc<TokenEnv>,
    r: &RewardFn,
    temp: Temperature,
) -> Result<(PolicyTable, PartitionTable)> {
    temp.validate()?;
    r.check_env(env)?;
    let v = env.vocab_size();
    let mut policy = PolicyTable::uniform(env);
    let mut log_z = Vec::with_capacity(env.num_prompts());
    for prompt in env.prompts() {
        let w = scaled_rewards(env, r, temp, prompt);
        // Soft value of each prefix state, filled deepest-first.
        let mut value = vec![0.0; env.num_states()];
        for depth in (0..env.max_len()).rev() {
            for s in env.states_at_depth(depth) {
                let mut row = vec![0.0; v];
                for (t, slot) in row.iter_mut().enumerate() {
                    *slot = match env.step(s, t as u32) {
                        Transition::Terminal(i) => w[i],
                        Transition::Continue(c) => value[c],
                    };
                }
                value[s] = log_sum_exp(&row);
                if !value[s].is_finite() {
                    return Err(Error::OverflowGuard);
                }
                policy.row_mut(prompt, s).copy_from_slice(&row);
            }
        }
        log_z.push(value[0]);
    }
    Ok((policy, PartitionTable { log_z, temperature: temp }))
}

/// `log Z(x) = log Σ_y exp(r(x,y)/α)` per prompt, constant `α`.
pub fn log_partition(r: &RewardFn, alpha: f64) -> Result<Vec<f64>> {
    Temperature::Constant(alpha).validate()?;
    Ok((0..r.num_prompts)
        .map(|p| {
            let scaled: Vec<f64> = r.prompt_values(PromptId(p)).iter().map(|v| v / alpha).collect();
            log_sum_exp(&scaled)
        })
        .collect())
}

/// `r(x,y) = α log π(y|x) + α log Z(x)`; with no table, `Z ≡ 1`.
pub fn reward_from_policy(policy: &PolicyTable, alpha: f64, z: Option<&PartitionTable>) -> Result<RewardFn> {
    Temperature::Constant(alpha).validate()?;
    let env = policy.env();
    let mut values = Vec::with_capacity(env.num_prompts() * env.num_responses());
    for p in env.prompts() {
        let shift = z.map_or(0.0, |t| alpha * t.log_z[p.0]);
        values.extend(policy.sequence_log_probs(p).into_iter().map(|lp| alpha * lp + shift));
    }
    RewardFn::from_table(env, "reparameterized", values)
}

/// `r'(x,y) = r(x,y) − α log Z(x)`: the class representative with `Σ_y exp(r'/α) = 1`.
pub fn canonical_projection(r: &RewardFn, alpha: f64) -> Result<RewardFn> {
    let log_z = log_partition(r, alpha)?;
    Ok(r.map("canonical", |p, _, v| v - alpha * log_z[p.0]))
}

/// Sequence-level total variation per prompt, maximized over prompts.
pub fn max_total_variation(p: &PolicyTable, q: &PolicyTable) -> Result<f64> {
    if !p.env().same_env(q.env()) {
        return Err(Error::EnvMismatch);
    }
    Ok(p.env()
        .prompts()
        .map(|x| {
            let a = p.sequence_log_probs(x);
            let b = q.sequence_log_probs(x);
            0.5 * a.iter().zip(&b).map(|(u, v)| (u.exp() - v.exp()).abs()).sum::<f64>()
        })
        .fold(0.0, f64::max))
}

/// Entropy-regularized objective on one prompt for an explicit distribution.
pub fn objective_of_distribution(rewards: &[f64], probs: &[f64], alpha: f64) -> f64 {
    rewards
        .iter()
        .zip(probs)
        .map(|(r, &p)| if p > 0.0 { p * (r - alpha * p.ln()) } else { 0.0 })
        .sum()
}

/// `E_x[ E_{y~π}[r] + α H(π(·|x)) ]` over all prompts.
pub fn maxent_objective(policy: &PolicyTable, r: &RewardFn, alpha: f64) -> Result<f64> {
    r.check_env(policy.env())?;
    let env = policy.env();
    let mut total = 0.0;
    for p in env.prompts() {
        let probs: Vec<f64> = policy.sequence_log_probs(p).iter().map(|lp| lp.exp()).collect();
        total += objective_of_distribution(r.prompt_values(p), &probs, alpha);
    }
    Ok(total / env.num_prompts() as f64)
}

/// Outcome of the equivalence-class checks for `r` and `r + f(x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassInvarianceReport {
    /// Max over sampled rankings of `|p_r(τ) − p_{r+f}(τ)|`, also against the
    /// projection of `r + f`.
    pub preference_gap: f64,
    /// Max TV between the closed-form optima of `r` and `r + f`.
    pub policy_tv: f64,
    /// Max of the projection mismatch and the recovered-shift error.
    pub uniqueness_gap: f64,
    pub tolerance: f64,
}

impl ClassInvarianceReport {
    pub fn passed(&self) -> bool {
        self.preference_gap <= self.tolerance
            && self.policy_tv <= self.tolerance
            && self.uniqueness_gap <= self.tolerance
    }

    /// Names of the sub-checks above tolerance.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.preference_gap > self.tolerance {
            out.push("lemma1_preference_invariance");
        }
        if self.policy_tv > self.tolerance {
            out.push("lemma2_policy_invariance");
        }
        if self.uniqueness_gap > self.tolerance {
            out.push("proposition1_uniqueness");
        }
        out
    }
}

pub type Projection<'a> = &'a dyn Fn(&RewardFn, f64) -> Result<RewardFn>;

pub fn check_class_invariance(
    env: &Arc<TokenEnv>,
    r: &RewardFn,
    shift: &RewardFn,
    alpha: f64,
    seed: u64,
) -> Result<ClassInvarianceReport> {
    check_class_invariance_with(env, r, shift, alpha, seed, &canonical_projection)
}

/// As [`check_class_invariance`] with a caller-supplied projection operator.
pub fn check_class_invariance_with(
    env: &Arc<TokenEnv>,
    r: &RewardFn,
    shift: &RewardFn,
    alpha: f64,
    seed: u64,
    project: Projection<'_>,
) -> Result<ClassInvarianceReport> {
    Temperature::Constant(alpha).validate()?;
    r.check_env(env)?;
    shift.check_env(env)?;
    let mut f = Vec::with_capacity(env.num_prompts());
    for p in env.prompts() {
        let vals = shift.prompt_values(p);
        if vals.iter().any(|v| *v != vals[0]) {
            return Err(Error::ShiftDependsOnResponse { prompt: p.0 });
        }
        f.push(vals[0]);
    }
    let shifted = r.map("shifted", |p, _, v| v + f[p.0]);
    let projected_shifted = project(&shifted, alpha)?;

    // Ranking probabilities on sampled rankings of up to four candidates.
    let mut rng = rng_from(seed, &[0x1e44a1]);
    let n = env.num_responses();
    let mut pref_gap: f64 = 0.0;
    for _ in 0..64 {
        let p = PromptId(rng.random_range(0..env.num_prompts()));
        let k = rng.random_range(2..=4.min(n.max(2)));
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
        let base: Vec<f64> = idx.iter().map(|&i| r.get(p, i)).collect();
        let tau = sample_ranking(&base, &mut rng)?;
        let moved: Vec<f64> = idx.iter().map(|&i| shifted.get(p, i)).collect();
        let proj: Vec<f64> = idx.iter().map(|&i| projected_shifted.get(p, i)).collect();
        let p0 = pl_log_prob(&base, &tau)?.exp();
        pref_gap = pref_gap
            .max((p0 - pl_log_prob(&moved, &tau)?.exp()).abs())
            .max((p0 - pl_log_prob(&proj, &tau)?.exp()).abs());
    }

    let temp = Temperature::Constant(alpha);
    let (pi_r, z_r) = optimal_policy_closed_form(env, r, temp)?;
    let (pi_shift, z_shift) = optimal_policy_closed_form(env, &shifted, temp)?;
    let policy_tv = max_total_variation(&pi_r, &pi_shift)?;

    let projected = project(r, alpha)?;
    let mut uniq_gap = projected.max_abs_diff(&projected_shifted);
    for p in env.prompts() {
        let recovered = alpha * (z_shift.log_z[p.0] - z_r.log_z[p.0]);
        uniq_gap = uniq_gap.max((recovered - f[p.0]).abs());
    }

    Ok(ClassInvarianceReport {
        preference_gap: pref_gap,
        policy_tv,
        uniqueness_gap: uniq_gap,
        tolerance: 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, EnvConfig};
    use crate::policy::{kl_exact, mean_entropy_exact};
    use crate::pref::bt_prob;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn env(v: usize, l: usize, p: usize) -> Arc<TokenEnv> {
        build_env(EnvConfig::new(v, l, p, 0)).unwrap()
    }

    fn random_reward(env: &TokenEnv, seed: u64, scale: f64) -> RewardFn {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RewardFn::from_fn(env, "random", |_, _, _| scale * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn constant_reward_gives_uniform_sequences() {
        let e = env(3, 3, 2);
        let (pi, z) = optimal_policy_closed_form(&e, &RewardFn::constant(&e, 1.3), Temperature::Constant(0.4)).unwrap();
        let n = e.num_responses() as f64;
        for p in e.prompts() {
            for lp in pi.sequence_log_probs(p) {
                assert!((lp.exp() - 1.0 / n).abs() < 1e-12);
            }
            assert!((z.log_z[p.0] - (n.ln() + 1.3 / 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_response_substitution() {
        // V=2, L=1: two responses; r = (ln 2, 0), α = 1 → (2/3, 1/3).
        let e = env(2, 1, 1);
        let r = RewardFn::from_table(&e, "r", vec![2f64.ln(), 0.0]).unwrap();
        let (pi, _) = optimal_policy_closed_form(&e, &r, Temperature::Constant(1.0)).unwrap();
        let lp = pi.sequence_log_probs(PromptId(0));
        assert!((lp[0].exp() - 2.0 / 3.0).abs() < 1e-15);
        assert!((lp[1].exp() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_direct_softmax() {
        let e = env(4, 3, 2);
        let r = random_reward(&e, 3, 2.0);
        for temp in [Temperature::Constant(0.7), Temperature::LengthNormalized { beta: 1.5 }] {
            let (pi, z) = optimal_policy_closed_form(&e, &r, temp).unwrap();
            for p in e.prompts() {
                let w: Vec<f64> = (0..e.num_responses())
                    .map(|i| r.get(p, i) / temp.effective(e.response_len(i)))
                    .collect();
                let lz = log_sum_exp(&w);
                assert!((lz - z.log_z[p.0]).abs() < 1e-12);
                let lp = pi.sequence_log_probs(p);
                let tv: f64 = 0.5 * lp.iter().zip(&w).map(|(a, b)| (a.exp() - (b - lz).exp()).abs()).sum::<f64>();
                assert!(tv < 1e-9);
            }
        }
    }

    #[test]
    fn extreme_rewards_stay_finite_in_log_domain() {
        let e = env(3, 2, 1);
        let r = random_reward(&e, 1, 1.0).map("big", |_, i, _| if i == 0 { 5000.0 } else { -5000.0 });
        let (pi, z) = optimal_policy_closed_form(&e, &r, Temperature::Constant(0.5)).unwrap();
        assert!(z.log_z[0].is_finite());
        assert!((pi.sequence_log_probs(PromptId(0))[0]).abs() < 1e-12);
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        let e = env(2, 1, 1);
        let r = RewardFn::constant(&e, 0.0);
        assert_eq!(
            optimal_policy_closed_form(&e, &r, Temperature::Constant(0.0)).unwrap_err(),
            Error::NonPositiveAlpha(0.0)
        );
        assert!(canonical_projection(&r, -1.0).is_err());
    }

    #[test]
    fn gibbs_fixed_point_objective_is_alpha_log_z() {
        let e = env(3, 3, 3);
        let r = random_reward(&e, 9, 1.0);
        let alpha = 0.6;
        let (pi, z) = optimal_policy_closed_form(&e, &r, Temperature::Constant(alpha)).unwrap();
        let obj = maxent_objective(&pi, &r, alpha).unwrap();
        let want = z.log_z.iter().map(|lz| alpha * lz).sum::<f64>() / 3.0;
        assert!((obj - want).abs() < 1e-8);
        assert!(kl_exact(&pi, &pi, PromptId(0)).unwrap().abs() < 1e-15);
        assert!(mean_entropy_exact(&pi) > 0.0);
    }

    #[test]
    fn reparameterization_round_trip() {
        let e = env(3, 3, 2);
        let r = random_reward(&e, 2, 1.0);
        let alpha = 0.9;
        let (pi, _) = optimal_policy_closed_form(&e, &r, Temperature::Constant(alpha)).unwrap();
        let back = reward_from_policy(&pi, alpha, None).unwrap();
        let (pi2, _) = optimal_policy_closed_form(&e, &back, Temperature::Constant(alpha)).unwrap();
        assert!(max_total_variation(&pi, &pi2).unwrap() < 1e-9);
    }

    #[test]
    fn uniform_policy_reward_is_minus_log_n() {
        let e = env(2, 1, 1);
        let u = PolicyTable::uniform(&e);
        let r = reward_from_policy(&u, 1.0, None).unwrap();
        for v in r.values() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn explicit_z_recovers_the_reward_and_cancels_in_bt() {
        let e = env(3, 2, 2);
        let r = random_reward(&e, 5, 1.5);
        let alpha = 0.8;
        let (pi, z) = optimal_policy_closed_form(&e, &r, Temperature::Constant(alpha)).unwrap();
        let with_z = reward_from_policy(&pi, alpha, Some(&z)).unwrap();
        assert!(with_z.max_abs_diff(&r) < 1e-12);
        let without = reward_from_policy(&pi, alpha, None).unwrap();
        for p in e.prompts() {
            for a in 0..e.num_responses() {
                for b in 0..e.num_responses() {
                    // BT with explicit Z terms: exp(r_a)/(exp(r_a)+exp(r_b)) on the full reward
                    let ra = alpha * pi.log_prob_index(p, a) + alpha * z.log_z[p.0];
                    let rb = alpha * pi.log_prob_index(p, b) + alpha * z.log_z[p.0];
                    let explicit = ra.exp() / (ra.exp() + rb.exp());
                    let cancelled = bt_prob(without.get(p, a), without.get(p, b)).unwrap();
                    assert!((explicit - cancelled).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_properties() {
        let e = env(3, 3, 3);
        let alpha = 0.5;
        let r = random_reward(&e, 8, 2.0);
        let once = canonical_projection(&r, alpha).unwrap();
        let twice = canonical_projection(&once, alpha).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-9);
        for lz in log_partition(&once, alpha).unwrap() {
            assert!(lz.abs() < 1e-9);
        }
        // fixed point
        let canonical = reward_from_policy(&PolicyTable::uniform(&e), alpha, None).unwrap();
        assert!(canonical_projection(&canonical, alpha).unwrap().max_abs_diff(&canonical) < 1e-12);
        // class collapse
        let f = [0.3, -1.7, 4.0];
        let moved = r.map("moved", |p, _, v| v + f[p.0]);
        assert!(canonical_projection(&moved, alpha).unwrap().max_abs_diff(&once) < 1e-9);
    }

    #[test]
    fn projection_of_alpha_log_pi_is_itself() {
        let e = env(4, 2, 2);
        let (pi, _) = optimal_policy_closed_form(&e, &random_reward(&e, 1, 1.0), Temperature::Constant(1.3)).unwrap();
        let r = reward_from_policy(&pi, 0.4, None).unwrap();
        assert!(canonical_projection(&r, 0.4).unwrap().max_abs_diff(&r) < 1e-9);
    }

    #[test]
    fn scale_law() {
        let e = env(3, 3, 2);
        let r = random_reward(&e, 4, 1.0);
        let (a, _) = optimal_policy_closed_form(&e, &r, Temperature::Constant(0.7)).unwrap();
        let scaled = r.map("scaled", |_, _, v| 3.5 * v);
        let (b, _) = optimal_policy_closed_form(&e, &scaled, Temperature::Constant(3.5 * 0.7)).unwrap();
        assert!(max_total_variation(&a, &b).unwrap() < 1e-9);
    }

    #[test]
    fn zero_shift_has_zero_discrepancy() {
        let e = env(3, 2, 2);
        let r = random_reward(&e, 4, 1.0);
        let rep = check_class_invariance(&e, &r, &RewardFn::constant(&e, 0.0), 0.5, 1).unwrap();
        assert!(rep.preference_gap < 1e-14);
        assert_eq!(rep.policy_tv, 0.0);
        assert_eq!(rep.uniqueness_gap, 0.0);
    }

    #[test]
    fn seeded_shift_passes_all_three_checks() {
        let e = env(3, 3, 4);
        let r = random_reward(&e, 11, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let f: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let shift = RewardFn::from_fn(&e, "f", |p, _, _| f[p.0]);
        let rep = check_class_invariance(&e, &r, &shift, 0.5, 3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn response_dependent_shift_is_rejected() {
        let e = env(3, 2, 2);
        let r = random_reward(&e, 1, 1.0);
        let shift = RewardFn::from_fn(&e, "bad", |_, i, _| i as f64);
        assert_eq!(
            check_class_invariance(&e, &r, &shift, 0.5, 0).unwrap_err(),
            Error::ShiftDependsOnResponse { prompt: 0 }
        );
    }

    #[test]
    fn corrupted_projection_breaks_preference_invariance() {
        let e = env(3, 3, 3);
        let r = random_reward(&e, 2, 1.0);
        let shift = RewardFn::from_fn(&e, "f", |p, _, _| p.0 as f64 - 1.0);
        let off_by_alpha = |r: &RewardFn, a: f64| -> Result<RewardFn> {
            Ok(canonical_projection(r, a)?.map("corrupt", |_, _, v| v / a))
        };
        let rep = check_class_invariance_with(&e, &r, &shift, 0.5, 0, &off_by_alpha).unwrap();
        assert!(!rep.passed());
        assert!(rep.failures().contains(&"lemma1_preference_invariance"));
    }
}
