//! Training loop: warm start, then per iteration sampled groups, cached
//! execution, group-relative advantages, a clipped policy-gradient step
//! and, when enabled, one localized counterfactual pair per group.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::env::{EnvParams, SyntheticBackend, SyntheticEnv, OFF_POOL_ROLES};
use super::objectives::{cf_gradient, grpo_gradient, warm_start, CfPairInput, CfWeights, GrpoConfig, Optimizer, Rollout};
use super::policy::{DecisionTrace, Grammar, PolicyError, PolicyParams};
use super::rng::{stream, stream_seed};
use crate::counterfactual::{local_counterfactual, CfConfig, CfContext, CfError, MutationKind, SamplerState};
use crate::exec_engine::{execute_with, ExecutionRecord, NodeCache, Schedule};
use crate::graph::{compile, OrchestrationGraph};
use crate::par;
use crate::reward::{group_advantages, orchestration_reward, RewardConfig, RewardError};
use crate::spec_model::{spec_digest, validate, OrchestrationSpec, TaskInstance};

// Stream coordinates.
const SAMPLE: u64 = 1;
const EXEC: u64 = 2;
const CF_PICK: u64 = 3;
const MUTATE: u64 = 4;
const TEACHER: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Counterfactual(#[from] CfError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub s_max: usize,
    pub a_max: usize,
    /// Specialized duty templates per role, besides the canonical duty.
    pub templates: usize,
    #[serde(flatten)]
    pub grpo: GrpoConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            s_max: 4,
            a_max: 3,
            templates: 2,
            grpo: GrpoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    pub enabled: bool,
    pub corpus_size: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            corpus_size: 50,
            epochs: 100,
            lr: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub tasks_per_iteration: usize,
    pub group_size: usize,
    /// Fan groups and layers out over threads. Results do not depend on it.
    pub parallel: bool,
    pub policy: PolicyConfig,
    pub warm_start: WarmStartConfig,
    pub reward: RewardConfig,
    pub counterfactual: CfConfig,
    pub env: EnvParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            iterations: 600,
            tasks_per_iteration: 4,
            group_size: 4,
            parallel: true,
            policy: PolicyConfig::default(),
            warm_start: WarmStartConfig::default(),
            reward: RewardConfig::default(),
            counterfactual: CfConfig::default(),
            env: EnvParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn check(&self) -> Result<(), TrainError> {
        self.reward.check()?;
        if self.group_size < 2 {
            return Err(TrainError::Config("group_size must be >= 2".into()));
        }
        if self.tasks_per_iteration == 0 {
            return Err(TrainError::Config("tasks_per_iteration must be >= 1".into()));
        }
        let p = &self.policy;
        if p.s_max == 0 || p.a_max == 0 {
            return Err(TrainError::Config("s_max and a_max must be >= 1".into()));
        }
        if p.templates > 4 {
            return Err(TrainError::Config("at most 4 duty templates are available".into()));
        }
        Ok(())
    }
}

/// One row of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Mean `total_tokens` over valid rollouts (0 when none is valid).
    pub mean_tokens: f64,
    pub validity: f64,
    pub success: f64,
    /// Worker tokens actually spent on rollouts (cache hits are free).
    pub rollout_tokens: u64,
    pub cf_tokens: u64,
    pub cumulative_tokens: u64,
    pub cf_pairs: usize,
    pub cf_filtered: usize,
    pub u_dep: f64,
    pub u_role: f64,
    pub u_cap: f64,
    pub p_dep: f64,
    pub p_role: f64,
    pub p_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub cf_enabled: bool,
    pub rows: Vec<IterationStats>,
}

impl TrainReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cumulative_tokens(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cumulative_tokens)
    }

    /// Mean of `f` over the last `n` rows.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&IterationStats) -> f64) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(f).sum::<f64>() / tail.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        for row in &self.rows {
            writeln!(w, "{}", serde_json::to_string(row).expect("row serializes"))?;
        }
        Ok(())
    }

    /// Write `report.csv` and `report.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(dir.join("report.jsonl"))?))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub report: TrainReport,
    pub params: PolicyParams,
    pub sampler: SamplerState,
    /// Corpus log-likelihood per warm-start epoch; empty when disabled.
    pub warm_start_history: Vec<f64>,
}

struct Sampled {
    spec: OrchestrationSpec,
    trace: DecisionTrace,
    graph: Option<OrchestrationGraph>,
    record: ExecutionRecord,
    reward: f64,
}

struct Group {
    task: TaskInstance,
    rollouts: Vec<Sampled>,
}

fn run_group(
    params: &PolicyParams,
    env: &SyntheticEnv,
    backend: &SyntheticBackend,
    cache: &NodeCache,
    cfg: &TrainConfig,
    it: usize,
    j: usize,
) -> Result<Group, TrainError> {
    let n = (it * cfg.tasks_per_iteration + j) as u64;
    let task = env.task(n as usize % env.archetypes.len(), n);
    let exec_seed = stream_seed(cfg.seed, &[EXEC, it as u64, j as u64]);
    let schedule = if cfg.parallel { Schedule::Parallel } else { Schedule::Sequential };
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let mut rng = stream(cfg.seed, &[SAMPLE, it as u64, j as u64, i as u64]);
        let (spec, trace) = params.sample_with(&task, &mut rng)?;
        let graph = if validate(&spec, &env.pool).valid {
            compile(&spec).ok()
        } else {
            None
        };
        let mut record = match &graph {
            Some(g) => execute_with(g, &task, backend, Some(cache), exec_seed, schedule),
            None => ExecutionRecord::invalid(&task, spec_digest(&spec), exec_seed),
        };
        let reward = orchestration_reward(&record, &task, graph.as_ref(), &cfg.reward)?;
        record.reward = Some(reward);
        rollouts.push(Sampled {
            spec,
            trace,
            graph,
            record,
            reward: reward.total,
        });
    }
    Ok(Group { task, rollouts })
}

fn policy_for(env: &SyntheticEnv, cfg: &TrainConfig) -> PolicyParams {
    let grammar = Grammar::new(
        cfg.policy.s_max,
        cfg.policy.a_max,
        env.pool.clone(),
        OFF_POOL_ROLES,
        env.templates.clone(),
        env.families(),
    );
    PolicyParams::zeros(grammar)
}

/// Train the toy policy. The report is a pure function of `cfg`.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.check()?;
    let env = Arc::new(SyntheticEnv::standard(cfg.env.clone(), cfg.policy.templates));
    let backend = SyntheticBackend::new(env.clone());
    let mut params = policy_for(&env, cfg);

    let mut warm_start_history = Vec::new();
    if cfg.warm_start.enabled {
        let ws = &cfg.warm_start;
        let corpus = env.teacher_corpus(ws.corpus_size, cfg.policy.s_max, stream_seed(cfg.seed, &[TEACHER]));
        let fit = warm_start(&params, &corpus, ws.epochs, ws.lr)?;
        params = fit.params;
        warm_start_history = fit.history;
    }
    let reference = (cfg.policy.grpo.kl_coef != 0.0).then(|| params.theta.clone());

    let cf_cfg = &cfg.counterfactual;
    let weights = CfWeights {
        lambda: cf_cfg.objective_weight,
        beta: cf_cfg.beta,
    };
    let schedule = if cfg.parallel { Schedule::Parallel } else { Schedule::Sequential };
    let mut sampler = SamplerState::new();
    let mut optimizer = Optimizer::new(cfg.policy.grpo.optimizer, params.theta.len());
    let mut cumulative = 0u64;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let group_ids: Vec<usize> = (0..cfg.tasks_per_iteration).collect();

    for it in 0..cfg.iterations {
        let cache = NodeCache::new();
        let groups = par::map(cfg.parallel, &group_ids, |&j| {
            run_group(&params, &env, &backend, &cache, cfg, it, j)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

        let mut advantages = Vec::with_capacity(groups.len());
        for g in &groups {
            let rewards: Vec<f64> = g.rollouts.iter().map(|r| r.reward).collect();
            advantages.push(group_advantages(&rewards, cfg.reward.adv_eps)?);
        }

        // Counterfactual pairs run against the sampling snapshot, in group
        // order, since the mutation sampler's state is shared.
        let mut cf_tokens = 0u64;
        let mut cf_pairs = 0usize;
        let mut cf_filtered = 0usize;
        let mut cf_inputs = Vec::new();
        if cf_cfg.enabled {
            for (j, g) in groups.iter().enumerate() {
                let valid: Vec<usize> = (0..g.rollouts.len()).filter(|&i| g.rollouts[i].graph.is_some()).collect();
                if valid.is_empty() {
                    continue;
                }
                let pick = stream_seed(cfg.seed, &[CF_PICK, it as u64, j as u64]) as usize % valid.len();
                let r = &g.rollouts[valid[pick]];
                let ctx = CfContext {
                    spec: &r.spec,
                    graph: r.graph.as_ref().expect("valid rollout"),
                    record: &r.record,
                    reward: r.reward,
                    task: &g.task,
                    pool: &env.pool,
                    backend: &backend,
                    cache: &cache,
                    reward_cfg: &cfg.reward,
                    schedule,
                };
                let seed = stream_seed(cfg.seed, &[MUTATE, it as u64, j as u64]);
                let Some(outcome) = local_counterfactual(&ctx, &mut sampler, cf_cfg, seed)? else {
                    continue;
                };
                cf_tokens += outcome.record.fresh_tokens();
                cf_pairs += 1;
                let contrast = outcome.pair.contrast.expect("evaluated pair");
                if contrast.filtered {
                    cf_filtered += 1;
                    continue;
                }
                let edited = params.score_spec(&outcome.edited, &g.task)?.1;
                cf_inputs.push((j, r.trace.clone(), edited, outcome.pair.site.agent.clone(), outcome.pair.site.kind, contrast));
            }
        }

        let rollouts: Vec<Rollout<'_>> = groups
            .iter()
            .zip(&advantages)
            .flat_map(|(g, adv)| {
                g.rollouts.iter().zip(adv).map(|(r, &a)| Rollout {
                    trace: &r.trace,
                    advantage: a,
                })
            })
            .collect();
        // The policy-gradient and counterfactual terms form one objective,
        // ascended jointly.
        let grpo = &cfg.policy.grpo;
        for _ in 0..grpo.epochs {
            let mut grad = grpo_gradient(&params.theta, &rollouts, reference.as_deref(), grpo);
            let scale = 1.0 / cf_inputs.len().max(1) as f64;
            for (j, orig, edited, agent, kind, contrast) in &cf_inputs {
                let pair = CfPairInput {
                    task: &groups[*j].task,
                    original: orig,
                    edited,
                    agent,
                    field: kind.field(),
                    contrast: *contrast,
                };
                for (i, g) in cf_gradient(&params.theta, &pair, weights)? {
                    *grad.entry(i).or_default() += scale * g;
                }
            }
            optimizer.ascend(&mut params, &grad, grpo.lr);
        }

        let all: Vec<&Sampled> = groups.iter().flat_map(|g| &g.rollouts).collect();
        let n = all.len() as f64;
        let valid: Vec<&&Sampled> = all.iter().filter(|r| r.graph.is_some()).collect();
        let rollout_tokens: u64 = all.iter().map(|r| r.record.fresh_tokens()).sum();
        cumulative += rollout_tokens + cf_tokens;
        let mean_tokens = if valid.is_empty() {
            0.0
        } else {
            valid.iter().map(|r| r.record.total_tokens as f64).sum::<f64>() / valid.len() as f64
        };
        let u = sampler.u;
        let p = sampler.p;
        let (d, ro, c) = (
            MutationKind::DependencyDeletion.index(),
            MutationKind::RoleRollback.index(),
            MutationKind::CapacityDowngrade.index(),
        );
        rows.push(IterationStats {
            iteration: it,
            mean_reward: all.iter().map(|r| r.reward).sum::<f64>() / n,
            mean_tokens,
            validity: valid.len() as f64 / n,
            success: all.iter().filter(|r| r.record.correct).count() as f64 / n,
            rollout_tokens,
            cf_tokens,
            cumulative_tokens: cumulative,
            cf_pairs,
            cf_filtered,
            u_dep: u[d],
            u_role: u[ro],
            u_cap: u[c],
            p_dep: p[d],
            p_role: p[ro],
            p_cap: p[c],
        });
    }

    Ok(TrainRun {
        report: TrainReport {
            seed: cfg.seed,
            cf_enabled: cf_cfg.enabled,
            rows,
        },
        params,
        sampler,
        warm_start_history,
    })
}
