//! Tabular autoregressive softmax policy.
//!
//! Every `(prompt, prefix state)` owns a row of `V` logits. Sequence
//! probabilities are products of the per-step softmaxes, so the policy class is
//! complete over the enumerable response space.

use std::sync::Arc;

use serde::{Deserialize, Serialize};


use crate::env::{PromptId, Response, TokenEnv, Transition};
use crate::error::{Error, Result};
use crate::math::{log_softmax, softmax};

#[derive(Debug, Clone)]
pub struct PolicyTable {
    env: Arc<TokenEnv>,
    logits: Arc<Vec<f64>>,
    version: u64,
}

/// Same index space as [`PolicyTable`] logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    values: Vec<f64>,
    fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    /// `θ ← θ + step · g`
    Plain { step: f64 },
    /// Adaptive-moment ascent with bias correction.
    Adam { step: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam(step: f64) -> Self {
        UpdateRule::Adam {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_size(&self) -> f64 {
        match *self {
            UpdateRule::Plain { step } | UpdateRule::Adam { step, .. } => step,
        }
    }
}

/// Holds the update rule together with any moment state it needs.
#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: UpdateRule,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(rule: UpdateRule) -> Result<Self> {
        let step = rule.step_size();
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidConfig(format!("step size must be > 0, got {step}")));
        }
        if let UpdateRule::Adam { beta1, beta2, eps, .. } = rule {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidConfig("adam decays must lie in [0,1) and eps > 0".into()));
            }
        }
        Ok(Self {
            rule,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    fn delta(&mut self, grad: &[f64]) -> Vec<f64> {
        match self.rule {
            UpdateRule::Plain { step } => grad.iter().map(|g| step * g).collect(),
            UpdateRule::Adam { step, beta1, beta2, eps } => {
                if self.m.len() != grad.len() {
                    self.m = vec![0.0; grad.len()];
                    self.v = vec![0.0; grad.len()];
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                grad.iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        step * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = crate::math::mean(xs);
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }
}

impl PolicyTable {
    pub fn uniform(env: &Arc<TokenEnv>) -> Self {
        let n = env.num_prompts() * env.num_states() * env.vocab_size();
        Self {
            env: Arc::clone(env),
            logits: Arc::new(vec![0.0; n]),
            version: 0,
        }
    }

    pub fn from_logits(env: &Arc<TokenEnv>, logits: Vec<f64>) -> Result<Self> {
        let n = env.num_prompts() * env.num_states() * env.vocab_size();
        if logits.len() != n {
            return Err(Error::InvalidConfig(format!(
                "expected {n} logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(Self {
            env: Arc::clone(env),
            logits: Arc::new(logits),
            version: 0,
        })
    }

    pub fn env(&self) -> &Arc<TokenEnv> {
        &self.env
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.logits).as_mut_slice()
    }

    pub(crate) fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    fn row_offset(&self, prompt: PromptId, state: usize) -> usize {
        (prompt.0 * self.env.num_states() + state) * self.env.vocab_size()
    }

    pub fn row(&self, prompt: PromptId, state: usize) -> &[f64] {
        let o = self.row_offset(prompt, state);
        &self.logits[o..o + self.env.vocab_size()]
    }

    pub fn row_mut(&mut self, prompt: PromptId, state: usize) -> &mut [f64] {
        let o = self.row_offset(prompt, state);
        let v = self.env.vocab_size();
        &mut Arc::make_mut(&mut self.logits)[o..o + v]
    }

    /// Conditional log-probabilities at one prefix state.
    pub fn conditional_log_probs(&self, prompt: PromptId, state: usize) -> Vec<f64> {
        log_softmax(self.row(prompt, state))
    }

    pub(crate) fn perturb_logits(&mut self, mut noise: impl FnMut() -> f64) {
        for x in Arc::make_mut(&mut self.logits).iter_mut() {
            *x += noise();
        }
    }

    fn same_env(&self, other: &PolicyTable) -> Result<()> {
        if self.env.same_env(&other.env) {
            Ok(())
        } else {
            Err(Error::EnvMismatch)
        }
    }

    /// `log π(y|x) = Σ_i log π(y_i | x, y_<i)`.
    pub fn log_prob(&self, prompt: PromptId, response: &Response) -> Result<f64> {
        self.env.check_prompt(prompt)?;
        let idx = self.env.response_index(response)?;
        Ok(self.log_prob_index(prompt, idx))
    }

    pub fn log_prob_index(&self, prompt: PromptId, index: usize) -> f64 {
        self.env
            .response_path(index)
            .into_iter()
            .map(|(s, t)| self.conditional_log_probs(prompt, s)[t as usize])
            .sum()
    }

    /// Exact `log π(y|x)` for every response of `prompt`, by response index.
    pub fn sequence_log_probs(&self, prompt: PromptId) -> Vec<f64> {
        let env = &self.env;
        let mut prefix = vec![0.0; env.num_states()];
        let row_lp: Vec<Vec<f64>> = (0..env.num_states())
            .map(|s| self.conditional_log_probs(prompt, s))
            .collect();
        for s in 1..env.num_states() {
            let (parent, token) = env.state_parent(s).expect("non-root state has a parent");
            prefix[s] = prefix[parent] + row_lp[parent][token as usize];
        }
        (0..env.num_responses())
            .map(|i| {
                let (s, t, _) = env.response_tail(i);
                prefix[s] + row_lp[s][t as usize]
            })
            .collect()
    }

    /// Ancestral sampling; returns the response index.
    pub fn sample_index<R: rand::Rng + ?Sized>(&self, prompt: PromptId, rng: &mut R) -> usize {
        let mut state = 0;
        loop {
            let probs = softmax(self.row(prompt, state));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut token = probs.len() - 1;
            for (t, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    token = t;
                    break;
                }
            }
            match self.env.step(state, token as u32) {
                Transition::Terminal(i) => return i,
                Transition::Continue(next) => state = next,
            }
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, prompt: PromptId, rng: &mut R) -> Response {
        self.env.response_at(self.sample_index(prompt, rng))
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn greedy_index(&self, prompt: PromptId) -> usize {
        let mut state = 0;
        loop {
            let row = self.row(prompt, state);
            let mut best = 0;
            for (t, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = t;
                }
            }
            match self.env.step(state, best as u32) {
                Transition::Terminal(i) => return i,
                Transition::Continue(next) => state = next,
            }
        }
    }

    pub fn greedy(&self, prompt: PromptId) -> Response {
        self.env.response_at(self.greedy_index(prompt))
    }

    /// Sequence-level entropy `-Σ_y π(y|x) log π(y|x)`.
    pub fn entropy_exact(&self, prompt: PromptId) -> f64 {
        self.sequence_log_probs(prompt)
            .into_iter()
            .map(|lp| if lp == f64::NEG_INFINITY { 0.0 } else { -lp.exp() * lp })
            .sum()
    }

    /// Gradient of `log π(y|x)` with respect to the logits, scaled by `coef`
    /// and added into `grad`.
    pub fn accumulate_log_prob_grad(&self, prompt: PromptId, index: usize, coef: f64, grad: &mut GradientTable) {
        if coef == 0.0 {
            return;
        }
        let v = self.env.vocab_size();
        for (s, t) in self.env.response_path(index) {
            let probs = softmax(self.row(prompt, s));
            let o = self.row_offset(prompt, s);
            for b in 0..v {
                let ind = if b == t as usize { 1.0 } else { 0.0 };
                grad.values[o + b] += coef * (ind - probs[b]);
            }
        }
    }

    /// Gradient of `Σ_y c(y) log π(y|x)` for a full coefficient vector over
    /// responses, in one backward sweep over prefix states.
    pub fn accumulate_weighted_log_prob_grad(&self, prompt: PromptId, coefs: &[f64], grad: &mut GradientTable) {
        let env = &self.env;
        let v = env.vocab_size();
        // mass[s][t]: total coefficient of responses that pass through (s, t).
        let mut through = vec![0.0; env.num_states() * v];
        for (i, &c) in coefs.iter().enumerate() {
            if c != 0.0 {
                let (s, t, _) = env.response_tail(i);
                through[s * v + t as usize] += c;
            }
        }
        for s in (1..env.num_states()).rev() {
            let total: f64 = through[s * v..(s + 1) * v].iter().sum();
            let (parent, token) = env.state_parent(s).expect("non-root");
            through[parent * v + token as usize] += total;
        }
        for s in 0..env.num_states() {
            let row = &through[s * v..(s + 1) * v];
            let total: f64 = row.iter().sum();
            if total == 0.0 && row.iter().all(|&x| x == 0.0) {
                continue;
            }
            let probs = softmax(self.row(prompt, s));
            let o = self.row_offset(prompt, s);
            for b in 0..v {
                grad.values[o + b] += row[b] - total * probs[b];
            }
        }
    }

    /// Applies `grad` as an ascent direction. Returns the pre-update snapshot.
    pub fn apply_gradient(&mut self, grad: &GradientTable, opt: &mut Optimizer) -> Result<PolicyTable> {
        if grad.fingerprint != self.env.fingerprint() || grad.values.len() != self.logits.len() {
            return Err(Error::EnvMismatch);
        }
        if grad.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let snapshot = self.clone();
        let delta = opt.delta(&grad.values);
        for (x, d) in Arc::make_mut(&mut self.logits).iter_mut().zip(delta) {
            *x += d;
        }
        self.version += 1;
        Ok(snapshot)
    }
}

/// `KL(p‖q)` on one prompt, by enumeration.
pub fn kl_exact(p: &PolicyTable, q: &PolicyTable, prompt: PromptId) -> Result<f64> {
    p.same_env(q)?;
    p.env.check_prompt(prompt)?;
    let lp = p.sequence_log_probs(prompt);
    let lq = q.sequence_log_probs(prompt);
    Ok(lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum())
}

/// Mean of [`kl_exact`] over every prompt of the environment.
pub fn mean_kl_exact(p: &PolicyTable, q: &PolicyTable) -> Result<f64> {
    let n = p.env.num_prompts();
    let mut total = 0.0;
    for x in p.env.prompts() {
        total += kl_exact(p, q, x)?;
    }
    Ok(total / n as f64)
}

/// Mean over prompts of the sequence entropy.
pub fn mean_entropy_exact(p: &PolicyTable) -> f64 {
    let n = p.env.num_prompts();
    p.env.prompts().map(|x| p.entropy_exact(x)).sum::<f64>() / n as f64
}

/// `E_{y~p}[log p − log q]` with `n_samples` draws per listed prompt.
pub fn kl_mc<R: rand::Rng + ?Sized>(
    p: &PolicyTable,
    q: &PolicyTable,
    prompts: &[PromptId],
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    p.same_env(q)?;
    if n_samples == 0 || prompts.is_empty() {
        return Err(Error::InvalidConfig("kl_mc needs n_samples >= 1 and a prompt".into()));
    }
    let mut xs = Vec::with_capacity(n_samples * prompts.len());
    for &x in prompts {
        p.env.check_prompt(x)?;
        let lp = p.sequence_log_probs(x);
        let lq = q.sequence_log_probs(x);
        for _ in 0..n_samples {
            let i = p.sample_index(x, rng);
            xs.push(lp[i] - lq[i]);
        }
    }
    Ok(McEstimate::from_samples(&xs))
}

impl GradientTable {
    pub fn zeros_like(policy: &PolicyTable) -> Self {
        Self {
            values: vec![0.0; policy.logits.len()],
            fingerprint: policy.env.fingerprint().to_string(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|g| *g *= c);
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale(c);
        self
    }

    pub fn add_assign(&mut self, other: &GradientTable) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    /// Indices with a nonzero entry.
    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use super::*;
    use crate::env::{build_env, EnvConfig};
    use crate::rng::rng_from;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn env(v: usize, l: usize, p: usize) -> Arc<TokenEnv> {
        build_env(EnvConfig::new(v, l, p, 1)).unwrap()
    }

    fn random_policy(env: &Arc<TokenEnv>, seed: u64, scale: f64) -> PolicyTable {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = env.num_prompts() * env.num_states() * env.vocab_size();
        let logits = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        PolicyTable::from_logits(env, logits).unwrap()
    }

    #[test]
    fn uniform_v2_three_tokens() {
        let e = env(2, 3, 1);
        let p = PolicyTable::uniform(&e);
        let lp = p.log_prob(PromptId(0), &Response::new(vec![0, 0, 1])).unwrap();
        assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((lp - (-2.079442)).abs() < 1e-6);
    }

    #[test]
    fn sequence_probabilities_normalize() {
        for (v, l) in [(2, 1), (3, 2), (4, 4), (5, 3)] {
            let e = env(v, l, 2);
            let p = random_policy(&e, 3, 2.0);
            for x in e.prompts() {
                let total: f64 = p.sequence_log_probs(x).iter().map(|lp| lp.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
                for row in 0..e.num_states() {
                    let s: f64 = softmax(p.row(x, row)).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_prob_matches_stepwise_softmax_oracle() {
        let e = env(4, 3, 2);
        let p = random_policy(&e, 8, 1.5);
        for x in e.prompts() {
            let all = p.sequence_log_probs(x);
            for (i, y) in e.enumerate_responses(x).unwrap().iter().enumerate() {
                // oracle: walk the prefix by hand, softmax each raw row
                let mut state = 0usize;
                let mut want = 0.0;
                for &t in &y.tokens {
                    let row = p.row(x, state);
                    let z: f64 = row.iter().map(|a| a.exp()).sum();
                    want += (row[t as usize].exp() / z).ln();
                    if let Transition::Continue(n) = e.step(state, t) {
                        state = n;
                    }
                }
                let got = p.log_prob(x, y).unwrap();
                assert!((got - want).abs() < 1e-12);
                assert!((all[i] - want).abs() < 1e-12);
                assert!(got <= 0.0);
            }
        }
    }

    #[test]
    fn near_deterministic_policy_always_picks_its_token() {
        let e = env(3, 1, 1);
        let mut p = PolicyTable::uniform(&e);
        p.row_mut(PromptId(0), 0)[1] = 50.0;
        let mut rng = rng_from(0, &[]);
        for _ in 0..10_000 {
            assert_eq!(p.sample(PromptId(0), &mut rng).tokens, vec![1]);
        }
    }

    #[test]
    fn sampling_frequencies_match_enumeration() {
        let e = env(3, 2, 1);
        let p = random_policy(&e, 21, 1.0);
        let lp = p.sequence_log_probs(PromptId(0));
        let n = 100_000;
        let mut counts = vec![0usize; e.num_responses()];
        let mut rng = rng_from(4, &[]);
        for _ in 0..n {
            counts[p.sample_index(PromptId(0), &mut rng)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let pr = lp[i].exp();
            let sd = (pr * (1.0 - pr) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - pr).abs() <= 4.0 * sd, "response {i}");
        }
    }

    #[test]
    fn uniform_v2_l1_sampling() {
        let e = env(2, 1, 1);
        let p = PolicyTable::uniform(&e);
        let mut rng = rng_from(9, &[]);
        let n = 10_000;
        let zeros = (0..n).filter(|_| p.sample_index(PromptId(0), &mut rng) == 0).count();
        let sd = (0.25 / n as f64).sqrt();
        assert!((zeros as f64 / n as f64 - 0.5).abs() <= 4.0 * sd);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let e = env(4, 3, 1);
        let p = random_policy(&e, 2, 1.0);
        let draw = |seed| {
            let mut rng = rng_from(seed, &[]);
            (0..50).map(|_| p.sample_index(PromptId(0), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn entropy_extremes() {
        let e = env(3, 2, 1);
        let mut p = PolicyTable::uniform(&e);
        // force the first step to end immediately
        p.row_mut(PromptId(0), 0)[2] = 800.0;
        assert!(p.entropy_exact(PromptId(0)).abs() < 1e-9);

        // uniform over the 2 responses of V=2, L=1
        let e2 = env(2, 1, 1);
        let u = PolicyTable::uniform(&e2);
        assert!((u.entropy_exact(PromptId(0)) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let e = env(3, 3, 1);
        let p = random_policy(&e, 5, 1.0);
        let lp = p.sequence_log_probs(PromptId(0));
        let mut rng = rng_from(77, &[]);
        let xs: Vec<f64> = (0..100_000).map(|_| -lp[p.sample_index(PromptId(0), &mut rng)]).collect();
        let mc = McEstimate::from_samples(&xs);
        let exact = p.entropy_exact(PromptId(0));
        assert!((mc.mean - exact).abs() <= 4.0 * mc.std_err, "{} vs {exact}", mc.mean);
        assert!(exact >= 0.0 && exact <= (e.num_responses() as f64).ln());
    }

    #[test]
    fn kl_hand_evaluation() {
        // V=2, L=1: responses [0], [1]; p = (0.75, 0.25), q uniform.
        let e = env(2, 1, 1);
        let q = PolicyTable::uniform(&e);
        let mut p = PolicyTable::uniform(&e);
        p.row_mut(PromptId(0), 0)[0] = 3f64.ln();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((want - 0.130812).abs() < 1e-6);
        assert!((kl_exact(&p, &q, PromptId(0)).unwrap() - want).abs() < 1e-12);
        assert!(kl_exact(&p, &p, PromptId(0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_for_random_pairs() {
        let e = env(3, 3, 1);
        for s in 0..100 {
            let p = random_policy(&e, s, 2.0);
            let q = random_policy(&e, 1000 + s, 2.0);
            assert!(kl_exact(&p, &q, PromptId(0)).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn kl_rejects_env_mismatch() {
        let a = PolicyTable::uniform(&env(3, 2, 1));
        let b = PolicyTable::uniform(&env(3, 3, 1));
        assert_eq!(kl_exact(&a, &b, PromptId(0)), Err(Error::EnvMismatch));
    }

    #[test]
    fn kl_mc_agrees_with_exact() {
        let e = env(3, 3, 2);
        let p = random_policy(&e, 1, 1.0);
        let q = random_policy(&e, 2, 1.0);
        let mut rng = rng_from(3, &[]);
        let mc = kl_mc(&p, &q, &[PromptId(1)], 100_000, &mut rng).unwrap();
        let exact = kl_exact(&p, &q, PromptId(1)).unwrap();
        assert!((mc.mean - exact).abs() <= 4.0 * mc.std_err);

        let same = kl_mc(&p, &p, &[PromptId(0)], 1000, &mut rng).unwrap();
        assert_eq!(same.mean, 0.0);
        assert_eq!(same.std_err, 0.0);
    }

    #[test]
    fn kl_mc_of_deterministic_policy_needs_one_sample() {
        let e = env(3, 1, 1);
        let mut p = PolicyTable::uniform(&e);
        p.row_mut(PromptId(0), 0)[0] = 800.0;
        let q = PolicyTable::uniform(&e);
        let mut rng = rng_from(0, &[]);
        let mc = kl_mc(&p, &q, &[PromptId(0)], 1, &mut rng).unwrap();
        assert!((mc.mean - 3f64.ln()).abs() < 1e-12);
        assert!((mc.mean - kl_exact(&p, &q, PromptId(0)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_bumps_version_only() {
        let e = env(3, 2, 1);
        let mut p = random_policy(&e, 1, 1.0);
        let before = p.logits().to_vec();
        let g = GradientTable::zeros_like(&p);
        let mut opt = Optimizer::new(UpdateRule::Plain { step: 0.5 }).unwrap();
        let snap = p.apply_gradient(&g, &mut opt).unwrap();
        assert_eq!(p.logits(), &before[..]);
        assert_eq!(p.version(), snap.version() + 1);
    }

    #[test]
    fn single_ascent_step_on_two_outcomes() {
        // logits (0, 0), gradient (+1, -1), step 0.5 → logits (0.5, -0.5)
        let e = env(2, 1, 1);
        let mut p = PolicyTable::uniform(&e);
        let mut g = GradientTable::zeros_like(&p);
        g.values_mut()[0] = 1.0;
        g.values_mut()[1] = -1.0;
        let mut opt = Optimizer::new(UpdateRule::Plain { step: 0.5 }).unwrap();
        p.apply_gradient(&g, &mut opt).unwrap();
        let p0 = p.log_prob(PromptId(0), &Response::new(vec![0])).unwrap().exp();
        let want = 0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp());
        assert!((p0 - want).abs() < 1e-15);
    }

    #[test]
    fn plain_ascent_is_linear() {
        let e = env(3, 2, 1);
        let mut p = random_policy(&e, 4, 1.0);
        let start = p.logits().to_vec();
        let mut g = GradientTable::zeros_like(&p);
        g.values_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin());
        let mut opt = Optimizer::new(UpdateRule::Plain { step: 0.1 }).unwrap();
        p.apply_gradient(&g, &mut opt).unwrap();
        let mid = p.logits().to_vec();
        p.apply_gradient(&g, &mut opt).unwrap();
        for i in 0..start.len() {
            let d1 = mid[i] - start[i];
            let d2 = p.logits()[i] - mid[i];
            assert!((d1 - d2).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let e = env(2, 2, 1);
        let mut p = PolicyTable::uniform(&e);
        let mut g = GradientTable::zeros_like(&p);
        g.values_mut()[0] = f64::NAN;
        let mut opt = Optimizer::new(UpdateRule::adam(0.1)).unwrap();
        assert_eq!(p.apply_gradient(&g, &mut opt).unwrap_err(), Error::NonFiniteGradient);
        assert!(Optimizer::new(UpdateRule::Plain { step: 0.0 }).is_err());
    }

    #[test]
    fn snapshot_survives_update() {
        let e = env(3, 2, 1);
        let mut p = random_policy(&e, 4, 1.0);
        let mut g = GradientTable::zeros_like(&p);
        g.values_mut()[0] = 1.0;
        let mut opt = Optimizer::new(UpdateRule::Plain { step: 1.0 }).unwrap();
        let snap = p.apply_gradient(&g, &mut opt).unwrap();
        let before = snap.sequence_log_probs(PromptId(0));
        p.apply_gradient(&g, &mut opt).unwrap();
        assert_eq!(snap.sequence_log_probs(PromptId(0)), before);
        assert_ne!(p.sequence_log_probs(PromptId(0)), before);
    }

    #[test]
    fn weighted_gradient_matches_per_response_accumulation() {
        let e = env(3, 3, 2);
        let p = random_policy(&e, 6, 1.0);
        let coefs: Vec<f64> = (0..e.num_responses()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut a = GradientTable::zeros_like(&p);
        p.accumulate_weighted_log_prob_grad(PromptId(1), &coefs, &mut a);
        let mut b = GradientTable::zeros_like(&p);
        for (i, &c) in coefs.iter().enumerate() {
            p.accumulate_log_prob_grad(PromptId(1), i, c, &mut b);
        }
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let e = env(3, 2, 1);
        let p = PolicyTable::uniform(&e);
        assert_eq!(p.greedy(PromptId(0)).tokens, vec![0, 0]);
    }
}
