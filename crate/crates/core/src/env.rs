//! Synthetic token environment.
//!
//! A response is a sequence of `1..=L` tokens: positions before the last are
//! non-end tokens, and the last position is either the end token or (only at
//! position `L`) a non-end token that truncates the response. The end token is
//! the highest id, `V - 1`.
//!
//! Prefix states (the non-end prefixes of length `0..L`) and responses are both
//! densely indexed. Prefix states are ordered by depth, then lexicographically.
//! Responses are ordered by length, then lexicographically.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maxent::{optimal_policy_closed_form, RewardFn, Temperature};
use crate::policy::PolicyTable;
use crate::pref::{bt_prob, sample_ranking, Permutation, Ranking};
use crate::rng::{rng_from, stream};

pub const DEFAULT_MAX_ENUMERATION: u64 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    pub seed: u64,
    pub max_enumeration: u64,
}

impl EnvConfig {
    pub fn new(vocab_size: usize, max_len: usize, num_prompts: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            max_len,
            num_prompts,
            seed,
            max_enumeration: DEFAULT_MAX_ENUMERATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<u32>,
}

impl Response {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    /// Number of emitted tokens, end token included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct StateInfo {
    parent: usize,
    token: u32,
    depth: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResponseInfo {
    state: usize,
    token: u32,
    len: usize,
}

/// Number of responses for `(V, L)` under the enumeration rule: `Σ_{k=0..L} (V-1)^k`.
pub fn response_space_size(vocab_size: usize, max_len: usize) -> u128 {
    let b = vocab_size.saturating_sub(1) as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(b);
    }
    total
}

#[derive(Debug)]
pub struct TokenEnv {
    config: EnvConfig,
    states: Vec<StateInfo>,
    depth_offsets: Vec<usize>,
    responses: Vec<ResponseInfo>,
    len_offsets: Vec<usize>,
    fingerprint: String,
}

pub fn build_env(config: EnvConfig) -> Result<Arc<TokenEnv>> {
    TokenEnv::new(config).map(Arc::new)
}

impl TokenEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        if config.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be >= 2, got {}",
                config.vocab_size
            )));
        }
        if config.max_len < 1 {
            return Err(Error::InvalidConfig("max_len must be >= 1".into()));
        }
        if config.num_prompts < 1 {
            return Err(Error::InvalidConfig("at least one prompt is required".into()));
        }
        let size = response_space_size(config.vocab_size, config.max_len);
        if size > config.max_enumeration as u128 {
            return Err(Error::EnumerationTooLarge {
                size,
                cap: config.max_enumeration,
            });
        }

        let v = config.vocab_size;
        let b = v - 1;
        let l = config.max_len;
        let end = (v - 1) as u32;

        let mut depth_offsets = Vec::with_capacity(l + 1);
        let mut states = Vec::new();
        let mut width = 1usize;
        for depth in 0..l {
            depth_offsets.push(states.len());
            for code in 0..width {
                let (parent, token) = if depth == 0 {
                    (usize::MAX, u32::MAX)
                } else {
                    (depth_offsets[depth - 1] + code / b, (code % b) as u32)
                };
                states.push(StateInfo { parent, token, depth });
            }
            width *= b;
        }
        depth_offsets.push(states.len());

        // len_offsets[k] is the index of the first response of length k (1-based).
        let mut len_offsets = vec![0usize; l + 2];
        let mut responses = Vec::with_capacity(size as usize);
        for len in 1..=l {
            len_offsets[len] = responses.len();
            let depth = len - 1;
            for state in depth_offsets[depth]..depth_offsets[depth + 1] {
                if len < l {
                    responses.push(ResponseInfo { state, token: end, len });
                } else {
                    for token in 0..v as u32 {
                        responses.push(ResponseInfo { state, token, len });
                    }
                }
            }
        }
        len_offsets[l + 1] = responses.len();
        debug_assert_eq!(responses.len() as u128, size);

        let canonical = serde_json::to_string(&config).expect("env config serializes");
        let fingerprint = hex::encode(Sha256::digest(canonical.as_bytes()));

        Ok(Self {
            config,
            states,
            depth_offsets,
            responses,
            len_offsets,
            fingerprint,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn num_prompts(&self) -> usize {
        self.config.num_prompts
    }

    pub fn prompts(&self) -> impl Iterator<Item = PromptId> {
        (0..self.config.num_prompts).map(PromptId)
    }

    pub fn end_token(&self) -> u32 {
        (self.config.vocab_size - 1) as u32
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_responses(&self) -> usize {
        self.responses.len()
    }

    /// Hex SHA-256 of the canonical environment config.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn same_env(&self, other: &TokenEnv) -> bool {
        std::ptr::eq(self, other) || self.fingerprint == other.fingerprint
    }

    pub fn state_depth(&self, state: usize) -> usize {
        self.states[state].depth
    }

    pub fn state_parent(&self, state: usize) -> Option<(usize, u32)> {
        let s = self.states[state];
        (s.depth > 0).then_some((s.parent, s.token))
    }

    /// States of a given depth, as an index range.
    pub fn states_at_depth(&self, depth: usize) -> std::ops::Range<usize> {
        self.depth_offsets[depth]..self.depth_offsets[depth + 1]
    }

    /// The non-end prefix leading to `state`.
    pub fn state_prefix(&self, state: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.states[state].depth);
        let mut s = state;
        while let Some((parent, token)) = self.state_parent(s) {
            out.push(token);
            s = parent;
        }
        out.reverse();
        out
    }

    /// What happens after emitting `token` at `state`.
    pub fn step(&self, state: usize, token: u32) -> Transition {
        let info = self.states[state];
        let b = self.config.vocab_size - 1;
        let l = self.config.max_len;
        let local = state - self.depth_offsets[info.depth];
        if info.depth + 1 == l {
            Transition::Terminal(self.len_offsets[l] + local * self.config.vocab_size + token as usize)
        } else if token == self.end_token() {
            Transition::Terminal(self.len_offsets[info.depth + 1] + local)
        } else {
            Transition::Continue(self.depth_offsets[info.depth + 1] + local * b + token as usize)
        }
    }

    /// Final (state, token) pair and length of a response index.
    pub fn response_tail(&self, index: usize) -> (usize, u32, usize) {
        let r = self.responses[index];
        (r.state, r.token, r.len)
    }

    pub fn response_len(&self, index: usize) -> usize {
        self.responses[index].len
    }

    /// `(state, token)` pairs visited while emitting response `index`, in order.
    pub fn response_path(&self, index: usize) -> Vec<(usize, u32)> {
        let (state, token, len) = self.response_tail(index);
        let mut path = Vec::with_capacity(len);
        path.push((state, token));
        let mut s = state;
        while let Some((parent, t)) = self.state_parent(s) {
            path.push((parent, t));
            s = parent;
        }
        path.reverse();
        path
    }

    pub fn response_at(&self, index: usize) -> Response {
        let (state, token, _) = self.response_tail(index);
        let mut tokens = self.state_prefix(state);
        tokens.push(token);
        Response { tokens }
    }

    pub fn check_prompt(&self, prompt: PromptId) -> Result<()> {
        if prompt.0 >= self.config.num_prompts {
            return Err(Error::InvalidConfig(format!(
                "prompt {} out of range (env has {})",
                prompt.0, self.config.num_prompts
            )));
        }
        Ok(())
    }

    /// Dense index of a response, validating it against the enumeration rule.
    pub fn response_index(&self, response: &Response) -> Result<usize> {
        let toks = &response.tokens;
        if toks.is_empty() || toks.len() > self.config.max_len {
            return Err(Error::InvalidResponse(format!(
                "length {} outside 1..={}",
                toks.len(),
                self.config.max_len
            )));
        }
        let mut state = 0usize;
        for (pos, &t) in toks.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::InvalidResponse(format!("token {t} out of range")));
            }
            match self.step(state, t) {
                Transition::Terminal(idx) => {
                    if pos + 1 != toks.len() {
                        return Err(Error::InvalidResponse(
                            "end token before the final position".into(),
                        ));
                    }
                    return Ok(idx);
                }
                Transition::Continue(next) => state = next,
            }
        }
        Err(Error::InvalidResponse(
            "response stops before an end token".into(),
        ))
    }

    /// Every response, length-then-lexicographic. Identical for all prompts.
    pub fn enumerate_responses(&self, prompt: PromptId) -> Result<Vec<Response>> {
        self.check_prompt(prompt)?;
        Ok((0..self.num_responses()).map(|i| self.response_at(i)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Continue(usize),
    Terminal(usize),
}

/// Linear gold reward over prompt-specific unigram counts, shared bigram
/// counts, and response length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReward {
    /// `[prompt * V + token]`
    pub unigram: Vec<f64>,
    /// `[prev * V + next]`
    pub bigram: Vec<f64>,
    pub length: f64,
    pub seed: u64,
    /// `max |r*|` over the enumerable space.
    pub r_max: f64,
    vocab_size: usize,
    num_prompts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldConfig {
    pub seed: u64,
    /// Multiplier on the random bigram weights, applied before the repeat penalty.
    pub bigram_scale: f64,
    /// Extra weight subtracted from every repeated non-end bigram `(t, t)`.
    pub repeat_penalty: f64,
    /// Weights are rescaled so that `max |r*| <= bound`.
    pub bound: f64,
}

impl Default for GoldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bigram_scale: 1.0,
            repeat_penalty: 0.0,
            bound: 10.0,
        }
    }
}

impl GoldReward {
    pub fn zero(env: &TokenEnv) -> Self {
        let v = env.vocab_size();
        Self {
            unigram: vec![0.0; env.num_prompts() * v],
            bigram: vec![0.0; v * v],
            length: 0.0,
            seed: 0,
            r_max: 0.0,
            vocab_size: v,
            num_prompts: env.num_prompts(),
        }
    }

    pub fn from_weights(env: &TokenEnv, unigram: Vec<f64>, bigram: Vec<f64>, length: f64) -> Result<Self> {
        let v = env.vocab_size();
        if unigram.len() != env.num_prompts() * v || bigram.len() != v * v {
            return Err(Error::InvalidConfig("gold weight shapes do not match env".into()));
        }
        let mut g = Self {
            unigram,
            bigram,
            length,
            seed: 0,
            r_max: 0.0,
            vocab_size: v,
            num_prompts: env.num_prompts(),
        };
        g.r_max = g.max_abs(env);
        Ok(g)
    }

    /// Seeded standard-normal weights, rescaled to keep `r_max <= cfg.bound`.
    pub fn seeded(env: &TokenEnv, cfg: GoldConfig) -> Result<Self> {
        let v = env.vocab_size();
        let mut rng = rng_from(cfg.seed, &[stream::GOLD]);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let unigram = draw(env.num_prompts() * v);
        let mut bigram = draw(v * v);
        let length = draw(1)[0];
        bigram.iter_mut().for_each(|w| *w *= cfg.bigram_scale);
        for t in 0..v - 1 {
            bigram[t * v + t] -= cfg.repeat_penalty;
        }
        let mut g = Self::from_weights(env, unigram, bigram, length)?;
        g.seed = cfg.seed;
        if g.r_max > cfg.bound && g.r_max > 0.0 {
            let s = cfg.bound / g.r_max;
            g.unigram.iter_mut().for_each(|w| *w *= s);
            g.bigram.iter_mut().for_each(|w| *w *= s);
            g.length *= s;
            g.r_max = g.max_abs(env);
        }
        Ok(g)
    }

    fn max_abs(&self, env: &TokenEnv) -> f64 {
        let mut m: f64 = 0.0;
        for p in env.prompts() {
            for i in 0..env.num_responses() {
                m = m.max(self.eval_tokens(p, &env.response_at(i).tokens).abs());
            }
        }
        m
    }

    fn eval_tokens(&self, prompt: PromptId, tokens: &[u32]) -> f64 {
        let v = self.vocab_size;
        let uni = &self.unigram[prompt.0 * v..(prompt.0 + 1) * v];
        let mut r = self.length * tokens.len() as f64;
        for &t in tokens {
            r += uni[t as usize];
        }
        for w in tokens.windows(2) {
            r += self.bigram[w[0] as usize * v + w[1] as usize];
        }
        r
    }

    /// `r*(x, y)`.
    pub fn reward(&self, env: &TokenEnv, prompt: PromptId, response: &Response) -> Result<f64> {
        env.check_prompt(prompt)?;
        env.response_index(response)?;
        if self.vocab_size != env.vocab_size() || self.num_prompts != env.num_prompts() {
            return Err(Error::EnvMismatch);
        }
        Ok(self.eval_tokens(prompt, &response.tokens))
    }

    /// Gold reward tabulated over every `(prompt, response)`.
    pub fn table(&self, env: &TokenEnv) -> RewardFn {
        RewardFn::from_fn(env, "gold", |p, _, y| self.eval_tokens(p, &y.tokens))
    }
}

pub fn gold_reward(env: &TokenEnv, gold: &GoldReward, prompt: PromptId, response: &Response) -> Result<f64> {
    gold.reward(env, prompt, response)
}

/// SFT stand-in: the MaxEnt optimum of the gold reward at `sft_temp`, with
/// i.i.d. `N(0, noise_scale^2)` perturbations added to every logit.
pub fn make_reference_policy(
    env: &Arc<TokenEnv>,
    gold: &GoldReward,
    sft_temp: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<PolicyTable> {
    if !(sft_temp > 0.0) || !sft_temp.is_finite() {
        return Err(Error::InvalidConfig(format!("sft_temp must be > 0, got {sft_temp}")));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise_scale must be >= 0, got {noise_scale}")));
    }
    let (mut policy, _) = optimal_policy_closed_form(env, &gold.table(env), Temperature::Constant(sft_temp))?;
    if noise_scale > 0.0 {
        let mut rng = rng_from(seed, &[stream::REFERENCE_NOISE]);
        policy.perturb_logits(|| noise_scale * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: PromptId,
    pub chosen: Response,
    pub rejected: Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub prompt: PromptId,
    pub ranking: Ranking,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub rankings: Vec<RankedItem>,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len() + self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pairs viewed as two-candidate rankings, followed by the explicit rankings.
    pub fn as_rankings(&self) -> Vec<RankedItem> {
        let mut out: Vec<RankedItem> = self
            .pairs
            .iter()
            .map(|p| RankedItem {
                prompt: p.prompt,
                ranking: Ranking {
                    candidates: vec![p.chosen.clone(), p.rejected.clone()],
                    order: Permutation::identity(2),
                },
            })
            .collect();
        out.extend(self.rankings.iter().cloned());
        out
    }
}

/// Pairs drawn i.i.d. from `sampler`, labelled by one Bernoulli draw from the
/// Bradley–Terry probability under `gold`. Prompts are visited round-robin.
pub fn sample_preference_dataset(
    env: &TokenEnv,
    gold: &GoldReward,
    sampler: &PolicyTable,
    n_pairs: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be >= 1".into()));
    }
    if !sampler.env().same_env(env) {
        return Err(Error::EnvMismatch);
    }
    let mut rng = rng_from(seed, &[stream::DATASET]);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let prompt = PromptId(i % env.num_prompts());
        let y1 = sampler.sample(prompt, &mut rng);
        let y2 = sampler.sample(prompt, &mut rng);
        let p1 = bt_prob(gold.eval_tokens(prompt, &y1.tokens), gold.eval_tokens(prompt, &y2.tokens))?;
        let first_wins = rng.random::<f64>() < p1;
        let (chosen, rejected) = if first_wins { (y1, y2) } else { (y2, y1) };
        pairs.push(PreferencePair { prompt, chosen, rejected });
    }
    Ok(PreferenceDataset { pairs, rankings: Vec::new() })
}

/// `k` candidates per item drawn from `sampler`, ranked by a Plackett–Luce draw under `gold`.
pub fn sample_ranked_dataset(
    env: &TokenEnv,
    gold: &GoldReward,
    sampler: &PolicyTable,
    n_items: usize,
    k: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_items == 0 {
        return Err(Error::InvalidConfig("n_items must be >= 1".into()));
    }
    if k < 2 {
        return Err(Error::InvalidPermutation(format!("need K >= 2 candidates, got {k}")));
    }
    let mut rng = rng_from(seed, &[stream::RANKINGS]);
    let mut rankings = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let prompt = PromptId(i % env.num_prompts());
        let candidates: Vec<Response> = (0..k).map(|_| sampler.sample(prompt, &mut rng)).collect();
        let rewards: Vec<f64> = candidates.iter().map(|y| gold.eval_tokens(prompt, &y.tokens)).collect();
        let order = sample_ranking(&rewards, &mut rng)?;
        rankings.push(RankedItem {
            prompt,
            ranking: Ranking { candidates, order },
        });
    }
    Ok(PreferenceDataset { pairs: Vec::new(), rankings })
}
