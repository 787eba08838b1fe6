//! Orchestration reward and group-relative advantages.
//!
//! For a valid specification
//! `total = execution_weight * r_task + efficiency_weight * b_tok - structure_weight * c_graph`,
//! otherwise `total = invalid_reward`.

use serde::{Deserialize, Serialize};

use crate::exec_engine::{extract_answer, ExecutionRecord};
use crate::graph::{structure_cost, OrchestrationGraph};
use crate::spec_model::TaskInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub execution_weight: f64,
    pub efficiency_weight: f64,
    pub structure_weight: f64,
    pub invalid_reward: f64,
    pub token_budget: f64,
    pub max_agents: usize,
    pub max_edges: usize,
    pub adv_eps: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            execution_weight: 1.0,
            efficiency_weight: 1.5,
            structure_weight: 0.1,
            invalid_reward: -1.0,
            token_budget: 4096.0,
            max_agents: 8,
            max_edges: 16,
            adv_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("task `{0}` has no answer key")]
    MissingAnswerKey(String),
    #[error("group-relative advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid reward config: {0}")]
    Config(String),
}

impl RewardConfig {
    pub fn check(&self) -> Result<(), RewardError> {
        let weights = [self.execution_weight, self.efficiency_weight, self.structure_weight];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(RewardError::Config("weights must be >= 0".into()));
        }
        if !(self.invalid_reward < 0.0) {
            return Err(RewardError::Config("invalid_reward must be < 0".into()));
        }
        if !(self.token_budget > 0.0) {
            return Err(RewardError::Config("token_budget must be > 0".into()));
        }
        if self.max_agents == 0 || self.max_edges == 0 {
            return Err(RewardError::Config("max_agents and max_edges must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub b_tok: f64,
    pub c_graph: f64,
    pub total: f64,
    pub valid: bool,
}

impl RewardBreakdown {
    pub fn invalid(cfg: &RewardConfig) -> Self {
        Self {
            r_task: 0.0,
            b_tok: 0.0,
            c_graph: 0.0,
            total: cfg.invalid_reward,
            valid: false,
        }
    }

    pub fn combine(r_task: f64, b_tok: f64, c_graph: f64, cfg: &RewardConfig) -> Self {
        Self {
            r_task,
            b_tok,
            c_graph,
            total: cfg.execution_weight * r_task + cfg.efficiency_weight * b_tok
                - cfg.structure_weight * c_graph,
            valid: true,
        }
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn answers_match(answer: &str, key: &str) -> bool {
    normalize_answer(answer) == normalize_answer(key)
}

/// 1 when the answer extracted from the final output matches the task's
/// key, 0 otherwise (including runs where a node failed).
pub fn task_success(record: &ExecutionRecord, task: &TaskInstance) -> Result<f64, RewardError> {
    let key = task
        .answer_key
        .as_deref()
        .ok_or_else(|| RewardError::MissingAnswerKey(task.id.clone()))?;
    if !record.valid || record.failure.is_some() {
        return Ok(0.0);
    }
    Ok(if answers_match(extract_answer(&record.final_answer), key) { 1.0 } else { 0.0 })
}

/// `max(0, 1 - total_tokens / token_budget)`.
pub fn token_bonus(record: &ExecutionRecord, cfg: &RewardConfig) -> f64 {
    token_bonus_for(record.total_tokens, cfg)
}

pub fn token_bonus_for(total_tokens: u64, cfg: &RewardConfig) -> f64 {
    (1.0 - total_tokens as f64 / cfg.token_budget).max(0.0)
}

/// Reward of one executed specification. `graph` is `None` for
/// specifications that failed validation.
pub fn orchestration_reward(
    record: &ExecutionRecord,
    task: &TaskInstance,
    graph: Option<&OrchestrationGraph>,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let Some(graph) = graph.filter(|_| record.valid) else {
        return Ok(RewardBreakdown::invalid(cfg));
    };
    let r_task = task_success(record, task)?;
    Ok(RewardBreakdown::combine(
        r_task,
        token_bonus(record, cfg),
        structure_cost(graph, cfg),
        cfg,
    ))
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}
