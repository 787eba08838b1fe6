//! Factorized, grammar-constrained orchestration policy.
//!
//! A specification is generated as a sequence of categorical decisions per
//! task family: number of steps, agents per step, and for every agent slot
//! its base role, duty variant, capacity and one include/skip decision per
//! agent of an earlier step. Each decision plays the part of one generated
//! token, and every serialized field maps back to the decisions that
//! produced it, so span-restricted objectives touch only those logits.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::env::{agent_name, DutyTemplates};
use crate::spec_model::{AgentEntry, CapacityLevel, Defaults, OrchestrationSpec, RolePool, SpanField, Step, TaskInstance};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("no policy context for task family `{0}`")]
    UnknownContext(String),
    #[error("specification is outside the policy grammar: {0}")]
    OutOfGrammar(String),
    #[error("span resolves to no decisions")]
    EmptySpan,
    #[error("warm-start corpus is empty")]
    EmptyCorpus,
    #[error("group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("counterfactual pair is filtered")]
    FilteredPair,
}

/// Vocabulary and sizes of the decision space.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub s_max: usize,
    pub a_max: usize,
    /// Base roles the policy can emit: the pool's roles, then off-pool ones.
    pub roles: Vec<String>,
    pub pool: RolePool,
    pub templates: DutyTemplates,
    /// Task families, one parameter block each.
    pub contexts: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    steps: usize,
    agents: usize,
    role: usize,
    duty: usize,
    cap: usize,
    refs: usize,
    size: usize,
}

impl Grammar {
    pub fn new(
        s_max: usize,
        a_max: usize,
        pool: RolePool,
        extra_roles: &[&str],
        templates: DutyTemplates,
        contexts: Vec<String>,
    ) -> Self {
        assert!(s_max >= 1 && a_max >= 1 && !contexts.is_empty());
        let mut roles: Vec<String> = pool.roles().map(str::to_string).collect();
        roles.extend(extra_roles.iter().map(|r| r.to_string()));
        Self {
            s_max,
            a_max,
            roles,
            pool,
            templates,
            contexts,
        }
    }

    pub fn slots(&self) -> usize {
        self.s_max * self.a_max
    }

    fn layout(&self) -> Layout {
        let v = self.roles.len();
        let nv = self.templates.variants();
        let slots = self.slots();
        let steps = 0;
        let agents = steps + self.s_max;
        let role = agents + self.s_max * self.a_max;
        let duty = role + slots * v;
        let cap = duty + slots * v * nv;
        let refs = cap + slots * v * 3;
        let size = refs + slots * slots;
        Layout {
            steps,
            agents,
            role,
            duty,
            cap,
            refs,
            size,
        }
    }

    pub fn params_per_context(&self) -> usize {
        self.layout().size
    }

    pub fn param_count(&self) -> usize {
        self.params_per_context() * self.contexts.len()
    }

    pub fn context(&self, task: &TaskInstance) -> Result<usize, PolicyError> {
        self.contexts
            .iter()
            .position(|c| c == task.family())
            .ok_or_else(|| PolicyError::UnknownContext(task.family().to_string()))
    }

    /// Every decision row as `(offset, width)`; width 1 marks a binary
    /// logit.
    pub fn rows(&self) -> Vec<(usize, usize)> {
        let l = self.layout();
        let v = self.roles.len();
        let nv = self.templates.variants();
        let slots = self.slots();
        let mut out = Vec::new();
        for c in 0..self.contexts.len() {
            let base = c * l.size;
            out.push((base + l.steps, self.s_max));
            for s in 0..self.s_max {
                out.push((base + l.agents + s * self.a_max, self.a_max));
            }
            for slot in 0..slots {
                out.push((base + l.role + slot * v, v));
                for r in 0..v {
                    out.push((base + l.duty + (slot * v + r) * nv, nv));
                    out.push((base + l.cap + (slot * v + r) * 3, 3));
                }
                for src in 0..slots {
                    out.push((base + l.refs + slot * slots + src, 1));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecisionKind {
    Steps,
    Agents { step: usize },
    Role { slot: usize },
    Duty { slot: usize },
    Capacity { slot: usize },
    Ref { target: usize, source: usize },
}

/// One decision: the logit row at `offset..offset + width` (a single
/// binary logit when `width == 1`), the chosen value and its log-prob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub kind: DecisionKind,
    pub offset: usize,
    pub width: usize,
    pub choice: usize,
    pub logp: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecisionTrace {
    pub decisions: Vec<Decision>,
    /// Decision indices behind each `(agent, field)` of the spec.
    pub fields: BTreeMap<(String, SpanField), Vec<usize>>,
}

impl DecisionTrace {
    pub fn log_prob(&self) -> f64 {
        self.decisions.iter().map(|d| d.logp).sum()
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn span(&self, agent: &str, field: SpanField) -> &[usize] {
        self.fields
            .get(&(agent.to_string(), field))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax_at(row: &[f64], i: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[i] - lse
}

/// Log-probability of `choice` for a decision row under `theta`.
pub fn decision_logp(theta: &[f64], offset: usize, width: usize, choice: usize) -> f64 {
    if width == 1 {
        let z = theta[offset];
        if choice == 1 {
            -softplus(-z)
        } else {
            -softplus(z)
        }
    } else {
        log_softmax_at(&theta[offset..offset + width], choice)
    }
}

/// Sparse gradient keyed by parameter index.
pub type SparseGrad = BTreeMap<usize, f64>;

/// Add `scale * d logp(choice) / d theta` for one decision row.
pub fn add_logp_grad(theta: &[f64], d: &Decision, scale: f64, out: &mut SparseGrad) {
    if d.width == 1 {
        let p = sigmoid(theta[d.offset]);
        let g = if d.choice == 1 { 1.0 - p } else { -p };
        *out.entry(d.offset).or_default() += scale * g;
    } else {
        let p = softmax(&theta[d.offset..d.offset + d.width]);
        for (j, pj) in p.iter().enumerate() {
            let g = if j == d.choice { 1.0 - pj } else { -pj };
            *out.entry(d.offset + j).or_default() += scale * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub grammar: Grammar,
    pub theta: Vec<f64>,
}

/// Source of decision values: a random sampler or an existing spec.
trait Picker {
    fn categorical(&mut self, kind: DecisionKind, probs: &[f64]) -> Result<usize, PolicyError>;
    fn binary(&mut self, kind: DecisionKind, p_include: f64) -> Result<bool, PolicyError>;
}

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Picker for Sampler<'_> {
    fn categorical(&mut self, _: DecisionKind, probs: &[f64]) -> Result<usize, PolicyError> {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(probs.len() - 1)
    }

    fn binary(&mut self, _: DecisionKind, p: f64) -> Result<bool, PolicyError> {
        Ok(self.rng.random::<f64>() < p)
    }
}

struct Reader<'a> {
    spec: &'a OrchestrationSpec,
    grammar: &'a Grammar,
}

impl Reader<'_> {
    fn agent(&self, slot: usize) -> Result<&AgentEntry, PolicyError> {
        let (s, a) = (slot / self.grammar.a_max, slot % self.grammar.a_max);
        self.spec
            .steps
            .get(s)
            .and_then(|st| st.agents.get(a))
            .ok_or_else(|| PolicyError::OutOfGrammar(format!("no agent at step {}, position {}", s + 1, a + 1)))
    }
}

fn oog(msg: String) -> PolicyError {
    PolicyError::OutOfGrammar(msg)
}

impl Picker for Reader<'_> {
    fn categorical(&mut self, kind: DecisionKind, probs: &[f64]) -> Result<usize, PolicyError> {
        let g = self.grammar;
        let choice = match kind {
            DecisionKind::Steps => self
                .spec
                .steps
                .len()
                .checked_sub(1)
                .ok_or_else(|| oog("no steps".into()))?,
            DecisionKind::Agents { step } => self.spec.steps[step]
                .agents
                .len()
                .checked_sub(1)
                .ok_or_else(|| oog(format!("step {} is empty", step + 1)))?,
            DecisionKind::Role { slot } => {
                let role = &self.agent(slot)?.role.base_role;
                g.roles
                    .iter()
                    .position(|r| r == role)
                    .ok_or_else(|| oog(format!("base role `{role}` not in the vocabulary")))?
            }
            DecisionKind::Duty { slot } => {
                let agent = self.agent(slot)?;
                g.templates
                    .variant_of(&g.pool, &agent.role.base_role, &agent.role.duty)
                    .ok_or_else(|| oog(format!("duty of `{}` is not a template", agent.agent_type())))?
            }
            DecisionKind::Capacity { slot } => self.agent(slot)?.capacity.rank(),
            DecisionKind::Ref { .. } => unreachable!("refs are binary"),
        };
        if choice >= probs.len() {
            return Err(oog(format!("{kind:?} value {} exceeds the grammar", choice + 1)));
        }
        Ok(choice)
    }

    fn binary(&mut self, kind: DecisionKind, _: f64) -> Result<bool, PolicyError> {
        let DecisionKind::Ref { target, source } = kind else {
            unreachable!("only refs are binary")
        };
        let src = self.agent(source)?.agent_type().to_string();
        Ok(self.agent(target)?.refs.contains(&src))
    }
}

impl PolicyParams {
    /// Uniform policy: all logits zero.
    pub fn zeros(grammar: Grammar) -> Self {
        let n = grammar.param_count();
        Self {
            grammar,
            theta: vec![0.0; n],
        }
    }

    fn walk(&self, task: &TaskInstance, pick: &mut dyn Picker) -> Result<(OrchestrationSpec, DecisionTrace), PolicyError> {
        let g = &self.grammar;
        let l = g.layout();
        let base = g.context(task)? * l.size;
        let theta = &self.theta;
        let v = g.roles.len();
        let nv = g.templates.variants();
        let slots = g.slots();
        let mut trace = DecisionTrace::default();

        let mut cat = |trace: &mut DecisionTrace, kind, offset: usize, width: usize| -> Result<usize, PolicyError> {
            let probs = softmax(&theta[offset..offset + width]);
            let choice = pick.categorical(kind, &probs)?;
            trace.decisions.push(Decision {
                kind,
                offset,
                width,
                choice,
                logp: decision_logp(theta, offset, width, choice),
            });
            Ok(choice)
        };

        let n_steps = cat(&mut trace, DecisionKind::Steps, base + l.steps, g.s_max)? + 1;
        let mut steps: Vec<Step> = Vec::with_capacity(n_steps);
        let mut counts = Vec::with_capacity(n_steps);
        let mut agent_decisions: Vec<(usize, usize, usize, usize)> = Vec::new();
        for s in 0..n_steps {
            let n_agents = cat(&mut trace, DecisionKind::Agents { step: s }, base + l.agents + s * g.a_max, g.a_max)? + 1;
            counts.push(n_agents);
            let mut agents = Vec::with_capacity(n_agents);
            for a in 0..n_agents {
                let slot = s * g.a_max + a;
                let r = cat(&mut trace, DecisionKind::Role { slot }, base + l.role + slot * v, v)?;
                let duty_id = trace.decisions.len();
                let variant = cat(&mut trace, DecisionKind::Duty { slot }, base + l.duty + (slot * v + r) * nv, nv)?;
                let cap_id = trace.decisions.len();
                let cap = cat(&mut trace, DecisionKind::Capacity { slot }, base + l.cap + (slot * v + r) * 3, 3)?;
                let role = &g.roles[r];
                agents.push(AgentEntry::new(
                    agent_name(role, s, a),
                    role,
                    g.templates.text(&g.pool, role, variant),
                    Vec::new(),
                    CapacityLevel::from_rank(cap).expect("three capacity levels"),
                ));
                agent_decisions.push((s, a, duty_id, cap_id));
            }
            steps.push(Step { agents });
        }
        // Reference decisions come last, once every source slot exists.
        let mut ref_ids: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for s in 1..n_steps {
            for a in 0..counts[s] {
                let target = s * g.a_max + a;
                for (s2, &n2) in counts.iter().enumerate().take(s) {
                    for a2 in 0..n2 {
                        let source = s2 * g.a_max + a2;
                        let offset = base + l.refs + target * slots + source;
                        let kind = DecisionKind::Ref { target, source };
                        let include = pick.binary(kind, sigmoid(theta[offset]))?;
                        let choice = usize::from(include);
                        ref_ids.entry((s, a)).or_default().push(trace.decisions.len());
                        trace.decisions.push(Decision {
                            kind,
                            offset,
                            width: 1,
                            choice,
                            logp: decision_logp(theta, offset, 1, choice),
                        });
                        if include {
                            let name = steps[s2].agents[a2].role.agent_type.clone();
                            steps[s].agents[a].refs.push(name);
                        }
                    }
                }
            }
        }
        for (s, a, duty_id, cap_id) in agent_decisions {
            let name = steps[s].agents[a].role.agent_type.clone();
            trace.fields.insert((name.clone(), SpanField::Duty), vec![duty_id]);
            trace.fields.insert((name.clone(), SpanField::Capacity), vec![cap_id]);
            trace
                .fields
                .insert((name, SpanField::Refs), ref_ids.remove(&(s, a)).unwrap_or_default());
        }
        Ok((
            OrchestrationSpec {
                defaults: Defaults::default(),
                steps,
            },
            trace,
        ))
    }

    /// Sample a specification; deterministic given `rng`'s state.
    pub fn sample_with(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<(OrchestrationSpec, DecisionTrace), PolicyError> {
        self.walk(task, &mut Sampler { rng })
    }

    pub fn sample_spec(&self, task: &TaskInstance, seed: u64) -> Result<(OrchestrationSpec, DecisionTrace), PolicyError> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        self.sample_with(task, &mut rng)
    }

    /// Exact log-probability of `spec` and its decision trace.
    pub fn score_spec(&self, spec: &OrchestrationSpec, task: &TaskInstance) -> Result<(f64, DecisionTrace), PolicyError> {
        let g = &self.grammar;
        if spec.steps.len() > g.s_max {
            return Err(oog(format!("{} steps exceed the maximum {}", spec.steps.len(), g.s_max)));
        }
        if let Some(s) = spec.steps.iter().position(|s| s.agents.len() > g.a_max) {
            return Err(oog(format!("step {} has more than {} agents", s + 1, g.a_max)));
        }
        let (rebuilt, trace) = self.walk(task, &mut Reader { spec, grammar: g })?;
        if rebuilt.steps != spec.steps {
            return Err(oog("agent names or reference order differ from the grammar's".into()));
        }
        Ok((trace.log_prob(), trace))
    }

    /// Mean log-prob of the decisions behind `(agent, field)`.
    pub fn span_logprob(
        &self,
        spec: &OrchestrationSpec,
        task: &TaskInstance,
        agent: &str,
        field: SpanField,
    ) -> Result<f64, PolicyError> {
        let (_, trace) = self.score_spec(spec, task)?;
        span_mean(&self.theta, &trace, agent, field)
    }

    /// Gradient of `log pi(spec)` with respect to `theta`.
    pub fn score_gradient(&self, trace: &DecisionTrace) -> SparseGrad {
        let mut g = SparseGrad::new();
        for d in &trace.decisions {
            add_logp_grad(&self.theta, d, 1.0, &mut g);
        }
        g
    }

    /// `theta += scale * grad`, touching only the gradient's indices.
    pub fn apply(&mut self, grad: &SparseGrad, scale: f64) {
        for (&i, &g) in grad {
            self.theta[i] += scale * g;
        }
    }
}

/// Mean log-prob of a field's decisions under `theta`.
pub fn span_mean(theta: &[f64], trace: &DecisionTrace, agent: &str, field: SpanField) -> Result<f64, PolicyError> {
    let ids = trace.span(agent, field);
    if ids.is_empty() {
        return Err(PolicyError::EmptySpan);
    }
    let sum: f64 = ids
        .iter()
        .map(|&i| {
            let d = &trace.decisions[i];
            decision_logp(theta, d.offset, d.width, d.choice)
        })
        .sum();
    Ok(sum / ids.len() as f64)
}

/// `scale * d span_mean / d theta`.
pub fn add_span_grad(theta: &[f64], trace: &DecisionTrace, agent: &str, field: SpanField, scale: f64, out: &mut SparseGrad) {
    let ids = trace.span(agent, field);
    let k = ids.len() as f64;
    for &i in ids {
        add_logp_grad(theta, &trace.decisions[i], scale / k, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy_sim::env::{EnvParams, SyntheticEnv, OFF_POOL_ROLES};
    use crate::spec_model::validate_structure;
    use proptest::prelude::*;

    pub(crate) fn grammar() -> (SyntheticEnv, Grammar) {
        let env = SyntheticEnv::standard(EnvParams::default(), 2);
        let g = Grammar::new(4, 3, env.pool.clone(), OFF_POOL_ROLES, env.templates.clone(), env.families());
        (env, g)
    }

    fn random_params(seed: u64, scale: f64) -> PolicyParams {
        use rand::{Rng, SeedableRng};
        let (_, g) = grammar();
        let mut p = PolicyParams::zeros(g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut p.theta {
            *t = rng.random_range(-scale..scale);
        }
        p
    }

    #[test]
    fn sampling_is_deterministic_and_self_consistent() {
        let (env, g) = grammar();
        let p = random_params(3, 1.5);
        for n in 0..40 {
            let task = env.task(n % 8, n as u64);
            let (spec, trace) = p.sample_spec(&task, n as u64).unwrap();
            assert_eq!(p.sample_spec(&task, n as u64).unwrap(), (spec.clone(), trace.clone()));
            assert!(validate_structure(&spec).is_empty(), "{spec:?}");
            let (lp, scored) = p.score_spec(&spec, &task).unwrap();
            assert!((lp - trace.log_prob()).abs() < 1e-12);
            assert_eq!(scored.decisions, trace.decisions);
            for agent in spec.agents() {
                assert_eq!(trace.span(agent.agent_type(), SpanField::Duty).len(), 1);
                assert_eq!(trace.span(agent.agent_type(), SpanField::Capacity).len(), 1);
            }
        }
        assert_eq!(g.rows().iter().map(|r| r.1).sum::<usize>(), g.param_count());
    }

    #[test]
    fn uniform_binary_decision_is_log_half() {
        let (env, g) = grammar();
        let p = PolicyParams::zeros(g);
        let task = env.task(0, 0);
        let spec = env.reference_spec(0);
        let (_, trace) = p.score_spec(&spec, &task).unwrap();
        let refs = trace.span("calculator_2_1", SpanField::Refs);
        assert_eq!(refs.len(), 1);
        assert!((trace.decisions[refs[0]].logp - 0.5f64.ln()).abs() < 1e-15);
        let s = p.span_logprob(&spec, &task, "calculator_2_1", SpanField::Refs).unwrap();
        assert!((s - (-0.6931471805599453)).abs() < 1e-12);
        assert_eq!(
            p.span_logprob(&spec, &task, "quantity_extractor_1_1", SpanField::Refs),
            Err(PolicyError::EmptySpan)
        );
    }

    #[test]
    fn suppressed_refs_give_edgeless_specs() {
        let (env, g) = grammar();
        let mut p = PolicyParams::zeros(g.clone());
        for (off, w) in g.rows() {
            if w == 1 {
                p.theta[off] = -1e3;
            }
        }
        for n in 0..50 {
            let (spec, _) = p.sample_spec(&env.task(n % 8, n as u64), n as u64).unwrap();
            assert_eq!(spec.ref_count(), 0);
        }
    }

    #[test]
    fn out_of_grammar_specs_are_rejected() {
        let (env, g) = grammar();
        let p = PolicyParams::zeros(g);
        let task = env.task(0, 0);
        let mut spec = env.reference_spec(0);
        spec.steps[0].agents[0].role.agent_type = "renamed".into();
        spec.steps[1].agents[0].refs = vec!["renamed".into()];
        assert!(matches!(p.score_spec(&spec, &task), Err(PolicyError::OutOfGrammar(_))));
        let mut spec = env.reference_spec(0);
        spec.steps[1].agents[0].role.duty = "free text".into();
        assert!(matches!(p.score_spec(&spec, &task), Err(PolicyError::OutOfGrammar(_))));
        let other = TaskInstance::new("nope#1", "x");
        assert!(matches!(
            p.score_spec(&env.reference_spec(0), &other),
            Err(PolicyError::UnknownContext(_))
        ));
    }

    proptest! {
        #[test]
        fn raising_a_chosen_logit_raises_logprob(seed in 0u64..500, which in 0usize..64, bump in 0.01f64..2.0) {
            let (env, _) = grammar();
            let p = random_params(seed, 1.0);
            let task = env.task((seed % 8) as usize, seed);
            let (spec, trace) = p.sample_spec(&task, seed).unwrap();
            let d = trace.decisions[which % trace.len()];
            let mut q = p.clone();
            if d.width == 1 {
                q.theta[d.offset] += if d.choice == 1 { bump } else { -bump };
            } else {
                q.theta[d.offset + d.choice] += bump;
            }
            let (before, _) = p.score_spec(&spec, &task).unwrap();
            let (after, _) = q.score_spec(&spec, &task).unwrap();
            prop_assert!(after > before);
        }
    }
}
