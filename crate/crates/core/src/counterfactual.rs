//! Single-field counterfactual edits and the adaptive mutation sampler.
//!
//! A valid specification is edited in exactly one field (one dependency
//! removed, one duty rolled back to its canonical text, or one capacity
//! lowered by a level). The reward contrast between original and edit is
//! credited to the edited field only, and running contrast estimates steer
//! which edit family gets sampled next.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec_engine::{execute_counterfactual, ExecutionRecord, NodeCache, Schedule, WorkerBackend};
use crate::graph::{compile, Edit, GraphError, OrchestrationGraph};
use crate::reward::{orchestration_reward, RewardConfig, RewardError};
use crate::spec_model::{
    serialize, CapacityLevel, FieldSpan, OrchestrationSpec, RolePool, SpanField, TaskInstance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    DependencyDeletion,
    RoleRollback,
    CapacityDowngrade,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [
        Self::DependencyDeletion,
        Self::RoleRollback,
        Self::CapacityDowngrade,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::DependencyDeletion => "dep",
            Self::RoleRollback => "role",
            Self::CapacityDowngrade => "cap",
        }
    }

    /// The serialized field an edit of this kind touches.
    pub fn field(self) -> SpanField {
        match self {
            Self::DependencyDeletion => SpanField::Refs,
            Self::RoleRollback => SpanField::Duty,
            Self::CapacityDowngrade => SpanField::Capacity,
        }
    }
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for MutationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dep" | "dependency" | "dependency_deletion" => Ok(Self::DependencyDeletion),
            "role" | "role_rollback" => Ok(Self::RoleRollback),
            "cap" | "capacity" | "capacity_downgrade" => Ok(Self::CapacityDowngrade),
            other => Err(format!("unknown mutation kind `{other}` (expected dep, role or cap)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MutationDetail {
    DeleteRef { target: String },
    Rollback { from: String, to: String },
    Downgrade { from: CapacityLevel, to: CapacityLevel },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MutationSite {
    pub kind: MutationKind,
    pub agent: String,
    pub detail: MutationDetail,
}

impl MutationSite {
    /// The graph element whose change drives recomputation.
    pub fn edit(&self) -> Edit {
        match &self.detail {
            MutationDetail::DeleteRef { target } => Edit::Edge {
                from: target.clone(),
                to: self.agent.clone(),
            },
            _ => Edit::Node(self.agent.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CfError {
    #[error("infeasible mutation: no feasible edit{}", .0.map(|k| format!(" of kind `{k}`")).unwrap_or_default())]
    Infeasible(Option<MutationKind>),
    #[error("stale mutation site for `{0}`")]
    StaleSite(String),
    #[error("probability floor {p_min} is infeasible for {kinds} kinds")]
    InfeasibleFloor { p_min: f64, kinds: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Feasible edit sites grouped by kind, each list in node order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Feasible {
    sites: [Vec<MutationSite>; 3],
}

impl Feasible {
    pub fn sites(&self, kind: MutationKind) -> &[MutationSite] {
        &self.sites[kind.index()]
    }

    pub fn kinds(&self) -> Vec<MutationKind> {
        MutationKind::ALL
            .into_iter()
            .filter(|k| !self.sites[k.index()].is_empty())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.iter().all(Vec::is_empty)
    }

    pub fn total(&self) -> usize {
        self.sites.iter().map(Vec::len).sum()
    }

    pub fn restrict(&self, kind: MutationKind) -> Feasible {
        let mut out = Feasible::default();
        out.sites[kind.index()] = self.sites[kind.index()].clone();
        out
    }
}

/// Every legal single edit of `g`. Role rollback is only offered where the
/// duty differs from the pool's canonical text.
pub fn feasible_mutations(g: &OrchestrationGraph, pool: &RolePool) -> Feasible {
    let mut f = Feasible::default();
    for (v, node) in g.nodes().iter().enumerate() {
        for &u in g.parent_indices(v) {
            f.sites[0].push(MutationSite {
                kind: MutationKind::DependencyDeletion,
                agent: node.id.clone(),
                detail: MutationDetail::DeleteRef {
                    target: g.node(u).id.clone(),
                },
            });
        }
        if let Some(canonical) = pool.canonical_duty(&node.role.base_role) {
            if canonical != node.role.duty {
                f.sites[1].push(MutationSite {
                    kind: MutationKind::RoleRollback,
                    agent: node.id.clone(),
                    detail: MutationDetail::Rollback {
                        from: node.role.duty.clone(),
                        to: canonical.to_string(),
                    },
                });
            }
        }
        if let Some(lower) = node.capacity.downgrade() {
            f.sites[2].push(MutationSite {
                kind: MutationKind::CapacityDowngrade,
                agent: node.id.clone(),
                detail: MutationDetail::Downgrade {
                    from: node.capacity,
                    to: lower,
                },
            });
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub enabled: bool,
    pub ema_alpha: f64,
    pub temperature: f64,
    pub min_prob: f64,
    pub delta_cap: f64,
    pub min_abs_delta: f64,
    /// Weight of the counterfactual objective relative to GRPO.
    pub objective_weight: f64,
    pub beta: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ema_alpha: 0.1,
            temperature: 1.0,
            min_prob: 0.05,
            delta_cap: 0.5,
            min_abs_delta: 0.01,
            objective_weight: 0.05,
            beta: 0.1,
        }
    }
}

/// Softmax of `u / tau` with every entry raised to at least `p_min`.
///
/// Entries falling below the floor are pinned to it and the remaining mass
/// is shared among the others in proportion to their softmax weights,
/// repeating until no free entry is below the floor.
pub fn floor_softmax(u: &[f64], tau: f64, p_min: f64) -> Result<Vec<f64>, CfError> {
    let k = u.len();
    if k == 0 || p_min * k as f64 > 1.0 + 1e-12 || !(tau > 0.0) {
        return Err(CfError::InfeasibleFloor { p_min, kinds: k });
    }
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = u.iter().map(|x| ((x - max) / tau).exp()).collect();
    let mut floored = vec![false; k];
    loop {
        let n_floored = floored.iter().filter(|f| **f).count();
        let mass = 1.0 - p_min * n_floored as f64;
        let free_w: f64 = (0..k).filter(|&i| !floored[i]).map(|i| w[i]).sum();
        let p: Vec<f64> = (0..k)
            .map(|i| if floored[i] { p_min } else { mass * w[i] / free_w })
            .collect();
        let low: Vec<usize> = (0..k).filter(|&i| !floored[i] && p[i] < p_min).collect();
        if low.is_empty() {
            return Ok(p);
        }
        for i in low {
            floored[i] = true;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub u: [f64; 3],
    pub p: [f64; 3],
}

impl Default for SamplerState {
    fn default() -> Self {
        Self {
            u: [0.0; 3],
            p: [1.0 / 3.0; 3],
        }
    }
}

impl SamplerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// EMA step on the sampled kind, then recompute `p` over all kinds.
    pub fn update(&mut self, kind: MutationKind, delta: f64, cfg: &CfConfig) -> Result<(), CfError> {
        let i = kind.index();
        self.u[i] = (1.0 - cfg.ema_alpha) * self.u[i] + cfg.ema_alpha * delta.abs();
        let p = floor_softmax(&self.u, cfg.temperature, cfg.min_prob)?;
        self.p.copy_from_slice(&p);
        Ok(())
    }

    /// `p` renormalized over the feasible kinds.
    pub fn restricted(&self, kinds: &[MutationKind]) -> Vec<(MutationKind, f64)> {
        let z: f64 = kinds.iter().map(|k| self.p[k.index()]).sum();
        kinds.iter().map(|&k| (k, self.p[k.index()] / z)).collect()
    }
}

/// Draw a kind from `p` restricted to the feasible kinds, then a site
/// uniformly among that kind's sites.
pub fn sample_mutation(state: &SamplerState, feasible: &Feasible, seed: u64) -> Result<MutationSite, CfError> {
    let kinds = feasible.kinds();
    if kinds.is_empty() {
        return Err(CfError::Infeasible(None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = state.restricted(&kinds);
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut kind = weights.last().expect("non-empty").0;
    for (k, p) in &weights {
        acc += p;
        if r < acc {
            kind = *k;
            break;
        }
    }
    let sites = feasible.sites(kind);
    Ok(sites[rng.random_range(0..sites.len())].clone())
}

/// An applied edit with the value spans of the edited field in both
/// canonical serializations.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedMutation {
    pub site: MutationSite,
    pub edited: OrchestrationSpec,
    pub original_text: String,
    pub edited_text: String,
    pub span_orig: FieldSpan,
    pub span_cf: FieldSpan,
}

pub fn apply_mutation(
    spec: &OrchestrationSpec,
    site: &MutationSite,
    pool: &RolePool,
) -> Result<AppliedMutation, CfError> {
    let stale = || CfError::StaleSite(site.agent.clone());
    let mut edited = spec.clone();
    let agent = edited.find_mut(&site.agent).ok_or_else(stale)?;
    match &site.detail {
        MutationDetail::DeleteRef { target } => {
            let pos = agent.refs.iter().position(|r| r == target).ok_or_else(stale)?;
            agent.refs.remove(pos);
        }
        MutationDetail::Rollback { from, to } => {
            let canonical = pool.canonical_duty(&agent.role.base_role).ok_or_else(stale)?;
            if agent.role.duty != *from || canonical != to || from == to {
                return Err(stale());
            }
            agent.role.duty = to.clone();
        }
        MutationDetail::Downgrade { from, to } => {
            if agent.capacity != *from || from.downgrade() != Some(*to) {
                return Err(stale());
            }
            agent.capacity = *to;
        }
    }
    let orig_ser = serialize(spec);
    let cf_ser = serialize(&edited);
    let field = site.kind.field();
    let span_orig = orig_ser.span(&site.agent, field).ok_or_else(stale)?;
    let span_cf = cf_ser.span(&site.agent, field).ok_or_else(stale)?;
    Ok(AppliedMutation {
        site: site.clone(),
        edited,
        original_text: orig_ser.text,
        edited_text: cf_ser.text,
        span_orig,
        span_cf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub delta: f64,
    /// `+1` when the original scored at least as well as the edit.
    pub direction: i8,
    pub weight: f64,
    /// Below the minimum contrast: contributes no loss.
    pub filtered: bool,
}

pub fn contrast(orig_reward: f64, cf_reward: f64, cfg: &CfConfig) -> Contrast {
    let delta = orig_reward - cf_reward;
    Contrast {
        delta,
        direction: if delta >= 0.0 { 1 } else { -1 },
        weight: delta.abs().min(cfg.delta_cap) / cfg.delta_cap,
        filtered: delta.abs() < cfg.min_abs_delta,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub original: String,
    pub edited: String,
    pub site: MutationSite,
    pub span_orig: FieldSpan,
    pub span_cf: FieldSpan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<Contrast>,
}

impl CounterfactualPair {
    pub fn from_applied(m: &AppliedMutation, contrast: Option<Contrast>) -> Self {
        Self {
            original: m.original_text.clone(),
            edited: m.edited_text.clone(),
            site: m.site.clone(),
            span_orig: m.span_orig.clone(),
            span_cf: m.span_cf.clone(),
            contrast,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("pair serializes")
    }
}

/// Inputs of one localized counterfactual step on an executed, valid spec.
pub struct CfContext<'a> {
    pub spec: &'a OrchestrationSpec,
    pub graph: &'a OrchestrationGraph,
    pub record: &'a ExecutionRecord,
    pub reward: f64,
    pub task: &'a TaskInstance,
    pub pool: &'a RolePool,
    pub backend: &'a dyn WorkerBackend,
    pub cache: &'a NodeCache,
    pub reward_cfg: &'a RewardConfig,
    pub schedule: Schedule,
}

#[derive(Debug, Clone)]
pub struct CfOutcome {
    pub pair: CounterfactualPair,
    pub edited: OrchestrationSpec,
    pub record: ExecutionRecord,
    pub cf_reward: f64,
    pub recomputed: usize,
    pub local: bool,
}

/// Sample, apply and evaluate one edit, then update the sampler with its
/// contrast. Returns `None` when the spec admits no edit.
pub fn local_counterfactual(
    ctx: &CfContext<'_>,
    state: &mut SamplerState,
    cfg: &CfConfig,
    seed: u64,
) -> Result<Option<CfOutcome>, CfError> {
    let feasible = feasible_mutations(ctx.graph, ctx.pool);
    if feasible.is_empty() {
        return Ok(None);
    }
    let site = sample_mutation(state, &feasible, seed)?;
    let applied = apply_mutation(ctx.spec, &site, ctx.pool)?;
    let cf_graph = compile(&applied.edited)?;
    let run = execute_counterfactual(
        ctx.graph,
        ctx.record,
        &cf_graph,
        &site.edit(),
        ctx.task,
        ctx.backend,
        ctx.cache,
        ctx.schedule,
    )?;
    let cf_reward = orchestration_reward(&run.record, ctx.task, Some(&cf_graph), ctx.reward_cfg)?;
    let c = contrast(ctx.reward, cf_reward.total, cfg);
    state.update(site.kind, c.delta, cfg)?;
    let mut record = run.record.clone();
    record.reward = Some(cf_reward);
    Ok(Some(CfOutcome {
        pair: CounterfactualPair::from_applied(&applied, Some(c)),
        edited: applied.edited,
        record,
        cf_reward: cf_reward.total,
        recomputed: run.recomputed.len(),
        local: run.is_local(),
    }))
}
