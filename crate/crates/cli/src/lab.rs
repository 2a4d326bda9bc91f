//! Builds everything a run needs from a config and dispatches training.

use std::collections::BTreeMap;
use std::sync::Arc;

use maxent_pref::env::{
    build_env, make_reference_policy, sample_preference_dataset, sample_ranked_dataset, EnvConfig, GoldConfig,
    GoldReward, PreferenceDataset, PromptId, Response, TokenEnv,
};
use maxent_pref::maxent::{optimal_policy_closed_form, RewardFn, Temperature};
use maxent_pref::metrics::{RunMetrics, WinRateEval};
use maxent_pref::offline::{train_offline, DpoConfig, OfflineMethod, OfflineSchedule, SimpoConfig};
use maxent_pref::online::{train_online, RlooConfig, ShapingConfig};
use maxent_pref::policy::{PolicyTable, UpdateRule};
use maxent_pref::pref::{fit_reward_model, FitConfig};
use maxent_pref::rng::{rng_from, stream};

use crate::config::{loss_name, MethodKind, OfflineLoss, OptimizerKind, RunConfig};
use crate::error::CliResult;

/// Environment, gold reward, reference policy and judge shared by all methods.
#[derive(Debug, Clone)]
pub struct Lab {
    pub env: Arc<TokenEnv>,
    pub gold: GoldReward,
    pub gold_table: RewardFn,
    pub reference: PolicyTable,
    pub eval: WinRateEval,
    pub baseline_win_rate: f64,
}

/// One response per prompt sampled from the gold optimum at `judge_temp`.
pub fn judge_references(
    env: &Arc<TokenEnv>,
    gold: &RewardFn,
    judge_temp: f64,
    seed: u64,
) -> CliResult<BTreeMap<PromptId, Response>> {
    let (human, _) = optimal_policy_closed_form(env, gold, Temperature::Constant(judge_temp))?;
    let mut rng = rng_from(seed, &[stream::REFERENCE_RESPONSES]);
    Ok(env.prompts().map(|x| (x, human.sample(x, &mut rng))).collect())
}

impl Lab {
    pub fn build(cfg: &RunConfig) -> CliResult<Self> {
        let e = &cfg.env;
        let env = build_env(EnvConfig {
            vocab_size: e.vocab_size,
            max_len: e.max_len,
            num_prompts: e.num_prompts,
            seed: cfg.env_seed(),
            max_enumeration: e.max_enumeration,
        })?;
        let r = &cfg.reward;
        let gold = GoldReward::seeded(
            &env,
            GoldConfig {
                seed: cfg.gold_seed(),
                bigram_scale: r.bigram_scale,
                repeat_penalty: r.repeat_penalty,
                bound: r.bound,
            },
        )?;
        let gold_table = gold.table(&env);
        let reference =
            make_reference_policy(&env, &gold, cfg.reference.sft_temp, cfg.reference.noise_scale, cfg.seed)?;
        let references = judge_references(&env, &gold_table, cfg.reference.judge_temp, cfg.seed)?;
        let eval = WinRateEval { gold: gold_table.clone(), references };
        let baseline_win_rate = eval.evaluate(&reference)?;
        Ok(Self { env, gold, gold_table, reference, eval, baseline_win_rate })
    }

    pub fn pairs(&self, cfg: &RunConfig) -> CliResult<PreferenceDataset> {
        Ok(sample_preference_dataset(&self.env, &self.gold, &self.reference, cfg.reward.dataset_size, cfg.seed)?)
    }

    /// Proxy reward fit to reference-policy pairs labelled by the gold reward.
    pub fn proxy(&self, cfg: &RunConfig) -> CliResult<RewardFn> {
        let r = &cfg.reward;
        let fit = FitConfig { kind: r.proxy_kind, ridge: r.fit_ridge, step: r.fit_step, epochs: r.fit_epochs };
        Ok(fit_reward_model(&self.pairs(cfg)?, &self.env, &fit)?.reward)
    }
}

fn update_rule(cfg: &RunConfig) -> UpdateRule {
    match cfg.schedule.optimizer {
        OptimizerKind::Plain => UpdateRule::Plain { step: cfg.schedule.step_size },
        OptimizerKind::Adam => UpdateRule::adam(cfg.schedule.step_size),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub lab: Lab,
    pub policy: PolicyTable,
    pub metrics: RunMetrics,
    pub proxy: Option<RewardFn>,
}

/// Builds the lab and trains the configured method.
pub fn execute(cfg: &RunConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let lab = Lab::build(cfg)?;
    let m = &cfg.method;
    let (policy, mut metrics, proxy) = match m.kind {
        MethodKind::Online => {
            let proxy = lab.proxy(cfg)?;
            let rloo = RlooConfig {
                k: m.k,
                clip_eps: m.clip_eps,
                update: update_rule(cfg),
                steps: cfg.schedule.steps,
                prompts_per_batch: m.prompts_per_batch,
                eval_interval: cfg.schedule.eval_interval,
                minibatches: m.minibatches,
            };
            let shaping = ShapingConfig { mode: m.mode, beta: m.beta };
            let (p, metrics) =
                train_online(&lab.reference, &lab.reference, &proxy, &lab.gold_table, &shaping, &rloo, cfg.seed, &lab.eval)?;
            (p, metrics, Some(proxy))
        }
        MethodKind::Offline => {
            let (method, data) = match m.loss {
                OfflineLoss::Simpo => (
                    OfflineMethod::Simpo(SimpoConfig { beta: m.beta, gamma: m.gamma, length_normalized: m.length_normalized }),
                    lab.pairs(cfg)?,
                ),
                OfflineLoss::Dpo => (
                    OfflineMethod::Dpo(DpoConfig { beta: m.beta, reference: lab.reference.clone() }),
                    lab.pairs(cfg)?,
                ),
                OfflineLoss::PlSimpo => (
                    OfflineMethod::PlSimpo { alpha: m.beta },
                    sample_ranked_dataset(
                        &lab.env,
                        &lab.gold,
                        &lab.reference,
                        cfg.reward.dataset_size,
                        cfg.reward.ranking_size,
                        cfg.seed,
                    )?,
                ),
            };
            let schedule = OfflineSchedule {
                steps: cfg.schedule.steps,
                batch_size: cfg.schedule.batch_size,
                update: update_rule(cfg),
                eval_interval: cfg.schedule.eval_interval,
                seed: cfg.seed,
            };
            let (p, metrics) = train_offline(&lab.reference, &data, &method, &schedule, &lab.eval)?;
            (p, metrics, None)
        }
    };
    metrics.set_meta("config_hash", cfg.hash());
    metrics.set_meta("seed", cfg.seed);
    metrics.set_meta("method", cfg.method_label());
    match m.kind {
        MethodKind::Online => metrics.set_meta("mode", m.mode.name()),
        MethodKind::Offline => metrics.set_meta("loss", loss_name(m.loss)),
    }
    metrics.set_meta("baseline_win_rate", lab.baseline_win_rate);
    Ok(RunOutput { lab, policy, metrics, proxy })
}
