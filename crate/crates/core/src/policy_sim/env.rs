//! Synthetic task environment and its worker backend.
//!
//! Each task archetype needs a chain of base roles. A worker playing
//! required role `k` can only cover it once role `k - 1` reaches it through
//! its parents, and succeeds with a probability set by its capacity and
//! duty variant. The final answer is right only when the whole chain is
//! covered, so under-provisioned specs fail while over-provisioned ones
//! succeed at a higher token cost.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rng::splitmix64;
use crate::exec_engine::{CacheKey, WorkerBackend, WorkerCall, WorkerError, WorkerResult};
use crate::spec_model::{AgentEntry, CapacityLevel, Defaults, OrchestrationSpec, RolePool, Step, TaskInstance};

/// Suffixes of the specialized duty templates; variant `j >= 1` appends
/// suffix `j - 1` to the canonical duty.
const TEMPLATE_SUFFIXES: &[&str] = &[
    "Focus on the exact quantities involved.",
    "Show every intermediate step.",
    "Keep the output to a single line.",
    "State any assumption explicitly.",
];

/// Roles the policy may emit that are missing from the pool. Specs using
/// them fail validation.
pub const OFF_POOL_ROLES: &[&str] = &["analyst", "summarizer"];

/// Duty texts available to each role: the canonical text followed by `k`
/// specialized templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DutyTemplates {
    k: usize,
}

impl DutyTemplates {
    pub fn new(k: usize) -> Self {
        assert!(k <= TEMPLATE_SUFFIXES.len(), "at most {} templates", TEMPLATE_SUFFIXES.len());
        Self { k }
    }

    pub fn variants(&self) -> usize {
        self.k + 1
    }

    pub fn canonical(pool: &RolePool, role: &str) -> String {
        pool.canonical_duty(role)
            .map(str::to_string)
            .unwrap_or_else(|| format!("Handle the {} part of the task.", role.replace('_', " ")))
    }

    pub fn text(&self, pool: &RolePool, role: &str, variant: usize) -> String {
        let base = Self::canonical(pool, role);
        match variant {
            0 => base,
            j => format!("{base} {}", TEMPLATE_SUFFIXES[j - 1]),
        }
    }

    pub fn variant_of(&self, pool: &RolePool, role: &str, duty: &str) -> Option<usize> {
        (0..self.variants()).find(|&j| self.text(pool, role, j) == duty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub role: String,
    pub threshold: CapacityLevel,
    /// Duty variant that works best for this role in this archetype.
    pub preferred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    pub chain: Vec<Requirement>,
}

impl Archetype {
    fn new(name: &str, chain: &[(&str, CapacityLevel, usize)]) -> Self {
        Self {
            name: name.into(),
            chain: chain
                .iter()
                .map(|(r, t, p)| Requirement {
                    role: r.to_string(),
                    threshold: *t,
                    preferred: *p,
                })
                .collect(),
        }
    }

    pub fn position(&self, role: &str) -> Option<usize> {
        self.chain.iter().position(|r| r.role == role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// Success probability at or above the capacity threshold.
    pub success_at_threshold: f64,
    /// Factor applied per capacity level below the threshold.
    pub below_threshold_factor: f64,
    pub canonical_duty_factor: f64,
    pub other_template_factor: f64,
    /// `(tokens_in, tokens_out)` per call for small, medium and large.
    pub tokens: [[u64; 2]; 3],
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            success_at_threshold: 0.95,
            below_threshold_factor: 0.5,
            canonical_duty_factor: 0.85,
            other_template_factor: 0.7,
            tokens: [[80, 40], [180, 80], [360, 160]],
        }
    }
}

impl EnvParams {
    pub fn call_tokens(&self, c: CapacityLevel) -> (u64, u64) {
        let [i, o] = self.tokens[c.rank()];
        (i, o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnv {
    pub archetypes: Vec<Archetype>,
    pub params: EnvParams,
    pub pool: RolePool,
    pub templates: DutyTemplates,
}

impl SyntheticEnv {
    /// The eight default archetypes over the baseline pool.
    pub fn standard(params: EnvParams, templates: usize) -> Self {
        use CapacityLevel::*;
        let archetypes = vec![
            Archetype::new("arith", &[("quantity_extractor", Small, 1), ("calculator", Medium, 2)]),
            Archetype::new(
                "units",
                &[("quantity_extractor", Small, 2), ("unit_checker", Small, 1), ("calculator", Medium, 1)],
            ),
            Archetype::new("algebra", &[("equation_builder", Medium, 1), ("calculator", Medium, 2)]),
            Archetype::new("multi_step", &[("planner", Small, 2), ("calculator", Large, 1)]),
            Archetype::new("checked", &[("calculator", Small, 1), ("verifier", Medium, 2)]),
            Archetype::new(
                "rates",
                &[("quantity_extractor", Small, 1), ("equation_builder", Large, 2), ("verifier", Small, 1)],
            ),
            Archetype::new("review", &[("planner", Medium, 1), ("critic", Small, 2)]),
            Archetype::new("lookup", &[("calculator", Small, 1)]),
        ];
        Self {
            archetypes,
            params,
            pool: RolePool::baseline(),
            templates: DutyTemplates::new(templates),
        }
    }

    pub fn families(&self) -> Vec<String> {
        self.archetypes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn archetype(&self, family: &str) -> Option<&Archetype> {
        self.archetypes.iter().find(|a| a.name == family)
    }

    /// Task `n` of archetype `idx`; the answer key is derived from `n`.
    pub fn task(&self, idx: usize, n: u64) -> TaskInstance {
        let a = &self.archetypes[idx];
        let key = 100 + splitmix64(n ^ (idx as u64) << 48) % 900;
        TaskInstance::new(format!("{}#{n}", a.name), format!("Solve {} problem number {n}.", a.name))
            .with_answer(key.to_string())
    }

    /// Probability that a worker covers requirement `req` of `a`.
    pub fn success_prob(&self, a: &Archetype, req: usize, capacity: CapacityLevel, variant: Option<usize>) -> f64 {
        let r = &a.chain[req];
        let p = &self.params;
        let base = match r.threshold.rank().checked_sub(capacity.rank()) {
            None | Some(0) => p.success_at_threshold,
            Some(gap) => p.success_at_threshold * p.below_threshold_factor.powi(gap as i32),
        };
        let duty = match variant {
            Some(v) if v == r.preferred => 1.0,
            Some(0) => p.canonical_duty_factor,
            _ => p.other_template_factor,
        };
        base * duty
    }

    /// The cheapest spec that covers the whole chain: one agent per step at
    /// its threshold capacity with the preferred duty.
    pub fn reference_spec(&self, idx: usize) -> OrchestrationSpec {
        let a = &self.archetypes[idx];
        let mut steps = Vec::new();
        let mut prev: Option<String> = None;
        for (s, r) in a.chain.iter().enumerate() {
            let name = agent_name(&r.role, s, 0);
            let duty = self.templates.text(&self.pool, &r.role, r.preferred.min(self.templates.k));
            steps.push(Step {
                agents: vec![AgentEntry::new(&name, &r.role, duty, prev.iter().cloned().collect(), r.threshold)],
            });
            prev = Some(name);
        }
        OrchestrationSpec {
            defaults: Defaults::default(),
            steps,
        }
    }

    /// A plausible but unpolished spec for archetype `idx`, standing in for
    /// a teacher model: random duty variants, capacities at or one level
    /// above the threshold, and sometimes an extra agent or reference.
    pub fn teacher_spec(&self, idx: usize, max_steps: usize, seed: u64) -> OrchestrationSpec {
        let a = &self.archetypes[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps: Vec<Step> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for (s, r) in a.chain.iter().enumerate().take(max_steps) {
            let name = agent_name(&r.role, s, 0);
            let variant = rng.random_range(0..self.templates.variants());
            let capacity = if rng.random_bool(0.5) {
                r.threshold
            } else {
                CapacityLevel::from_rank(r.threshold.rank() + 1).unwrap_or(CapacityLevel::Large)
            };
            let mut refs: Vec<String> = names.last().cloned().into_iter().collect();
            if s >= 2 && rng.random_bool(0.3) {
                refs.insert(0, names[s - 2].clone());
            }
            steps.push(Step {
                agents: vec![AgentEntry::new(
                    &name,
                    &r.role,
                    self.templates.text(&self.pool, &r.role, variant),
                    refs,
                    capacity,
                )],
            });
            names.push(name);
        }
        if steps.len() < max_steps && rng.random_bool(0.3) {
            let role = if a.position("verifier").is_some() { "critic" } else { "verifier" };
            let s = steps.len();
            steps.push(Step {
                agents: vec![AgentEntry::new(
                    agent_name(role, s, 0),
                    role,
                    self.templates.text(&self.pool, role, 0),
                    names.last().cloned().into_iter().collect(),
                    CapacityLevel::Medium,
                )],
            });
        }
        OrchestrationSpec {
            defaults: Defaults::default(),
            steps,
        }
    }

    /// `n` teacher `(task, spec)` pairs cycling over the archetypes.
    pub fn teacher_corpus(&self, n: usize, max_steps: usize, seed: u64) -> Vec<(TaskInstance, OrchestrationSpec)> {
        (0..n)
            .map(|i| {
                let idx = i % self.archetypes.len();
                let s = splitmix64(seed ^ splitmix64(i as u64));
                (self.task(idx, 1_000_000 + i as u64), self.teacher_spec(idx, max_steps, s))
            })
            .collect()
    }
}

/// Agent type of the agent at `(step, position)` playing `role`.
pub fn agent_name(role: &str, step: usize, position: usize) -> String {
    format!("{role}_{}_{}", step + 1, position + 1)
}

const COVERED: &str = "covered:";

fn parse_covered(output: &str) -> Vec<&str> {
    output
        .lines()
        .find_map(|l| l.strip_prefix(COVERED))
        .map(|rest| rest.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default()
}

/// Seeded stochastic worker for [`SyntheticEnv`]. Its random draw depends
/// only on the seed and the call's cache key, so cached and fresh results
/// always agree.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    env: Arc<SyntheticEnv>,
}

impl SyntheticBackend {
    pub fn new(env: Arc<SyntheticEnv>) -> Self {
        Self { env }
    }

    pub fn env(&self) -> &SyntheticEnv {
        &self.env
    }
}

impl WorkerBackend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn call(&self, call: &WorkerCall<'_>, seed: u64) -> Result<WorkerResult, WorkerError> {
        let env = &*self.env;
        let a = env
            .archetype(call.task.family())
            .ok_or_else(|| WorkerError::Worker(format!("unknown task family `{}`", call.task.family())))?;
        let mut covered = vec![false; a.chain.len()];
        for (_, out) in &call.parent_outputs {
            for role in parse_covered(out) {
                if let Some(k) = a.position(role) {
                    covered[k] = true;
                }
            }
        }
        if let Some(k) = a.position(&call.role.base_role) {
            if !covered[k] && (k == 0 || covered[k - 1]) {
                let variant = env.templates.variant_of(&env.pool, &call.role.base_role, &call.role.duty);
                let p = env.success_prob(a, k, call.capacity, variant);
                let key = CacheKey::for_call(call);
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ key.prefix_u64()));
                if rng.random::<f64>() < p {
                    covered[k] = true;
                }
            }
        }
        let answer = if covered.iter().all(|c| *c) {
            call.task.answer_key.as_deref().unwrap_or("unknown")
        } else {
            "unknown"
        };
        let list: Vec<&str> = a
            .chain
            .iter()
            .zip(&covered)
            .filter(|(_, c)| **c)
            .map(|(r, _)| r.role.as_str())
            .collect();
        let (tin, tout) = env.params.call_tokens(call.capacity);
        Ok(WorkerResult::new(
            format!("answer: {answer}\n{COVERED} {}", list.join(",")),
            tin,
            tout,
        ))
    }
}
