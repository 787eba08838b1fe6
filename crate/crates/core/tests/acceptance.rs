//! One PASS/FAIL line per primary acceptance criterion. Exits non-zero when
//! any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{fixture, numeric_grad, random_spec, relative_error, stub, EXAMPLE_SPEC};
use orchestra::counterfactual::{
    apply_mutation, contrast, feasible_mutations, floor_softmax, sample_mutation, CfConfig, MutationDetail,
    SamplerState,
};
use orchestra::exec_engine::{
    execute, execute_counterfactual, CapacityModels, ExecutionRecord, HttpBackend, HttpConfig, NodeCache, Schedule,
    ScriptedBackend, SyntheticBackend, WorkerBackend,
};
use orchestra::graph::{compile, structure_cost, structure_cost_counts};
use orchestra::policy_sim::{
    cf_gradient, cf_objective, cf_step, grpo_gradient, grpo_objective, train, CfPairInput, CfWeights, DecisionTrace,
    EnvParams, Grammar, GrpoConfig, PolicyParams, Rollout, SyntheticEnv, TrainConfig, OFF_POOL_ROLES,
};
use orchestra::reward::{group_advantages, orchestration_reward, token_bonus_for, RewardBreakdown, RewardConfig};
use orchestra::spec_model::{
    decode_fragment, parse_spec, rules, serialize, validate, validate_text, FieldValue, RolePool,
    SpanField, TaskInstance,
};
use petgraph::algo::is_cyclic_directed;
use petgraph::graph::DiGraph;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs as f64, || {
        format!("{what} took {elapsed:.1?}, limit {limit_secs} s")
    })
}

// Validator suite.

const VIOLATIONS: &[(&str, &str)] = &[
    ("missing_field.yaml", rules::MISSING_FIELD),
    ("unknown_capacity.yaml", rules::UNKNOWN_CAPACITY),
    ("duplicate_type.yaml", rules::DUPLICATE_TYPE),
    ("self_ref.yaml", rules::SELF_REF),
    ("duplicate_ref.yaml", rules::DUPLICATE_REF),
    ("first_step_ref.yaml", rules::FIRST_STEP_REF),
    ("forward_ref.yaml", rules::FORWARD_REF),
];

const FUZZ_ALPHABET: &[&str] = &[
    " ", "\n", "  ", "-", ":", "[", "]", ",", "\"", "'", "#", "{", "}", "ref", "type", "capacity", "small", "huge",
    "steps", "agents", "\t", "|", ">", "&a", "*a", "!!str", "\\", "é", "0",
];

fn fuzz_text(rng: &mut ChaCha8Rng, pool: &RolePool) -> String {
    let base = if rng.random_bool(0.5) {
        EXAMPLE_SPEC.to_string()
    } else {
        serialize(&random_spec(rng, pool)).text
    };
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..rng.random_range(1..12) {
        if chars.is_empty() {
            break;
        }
        let at = rng.random_range(0..chars.len());
        match rng.random_range(0..4) {
            0 => {
                let end = (at + rng.random_range(1..40)).min(chars.len());
                chars.drain(at..end);
            }
            1 => {
                let piece = FUZZ_ALPHABET.choose(rng).unwrap();
                for (k, c) in piece.chars().enumerate() {
                    chars.insert(at + k, c);
                }
            }
            2 => chars[at] = FUZZ_ALPHABET.choose(rng).unwrap().chars().next().unwrap_or(' '),
            _ => {
                let end = (at + rng.random_range(1..60)).min(chars.len());
                let dup: Vec<char> = chars[at..end].to_vec();
                let to = rng.random_range(0..chars.len());
                for (k, c) in dup.into_iter().enumerate() {
                    chars.insert(to + k, c);
                }
            }
        }
    }
    chars.into_iter().collect()
}

fn validator_suite() -> Outcome {
    let start = Instant::now();
    let pool = RolePool::baseline();
    let report = validate_text(EXAMPLE_SPEC, &pool);
    ensure(report.valid, || format!("example spec rejected: {:?}", report.errors))?;
    for (file, rule) in VIOLATIONS {
        let r = validate_text(&fixture(&format!("invalid/{file}")), &pool);
        ensure(!r.valid && r.rule_ids() == [*rule], || {
            format!("{file}: expected [{rule}], got {:?}", r.rule_ids())
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut crashes = 0;
    let mut rejected = 0;
    for _ in 0..1000 {
        let text = fuzz_text(&mut rng, &pool);
        match catch_unwind(AssertUnwindSafe(|| validate_text(&text, &pool))) {
            Ok(r) => rejected += usize::from(!r.valid),
            Err(_) => crashes += 1,
        }
    }
    ensure(crashes == 0, || format!("{crashes} of 1000 fuzzed inputs panicked"))?;
    within(start.elapsed(), 10, "validator suite")?;
    Ok(format!(
        "example spec valid; 7/7 fixtures rejected with their rule; 1000 fuzzed inputs, 0 crashes ({rejected} rejected); {:.2?}",
        start.elapsed()
    ))
}

// Compiler oracle.

fn compiler_oracle() -> Outcome {
    let pool = RolePool::baseline();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut edges = 0;
    for i in 0..500 {
        let spec = random_spec(&mut rng, &pool);
        ensure(validate(&spec, &pool).valid, || format!("generator produced an invalid spec at {i}"))?;
        let g = compile(&spec).map_err(|e| e.to_string())?;
        let agents: Vec<_> = spec.agents().collect();
        let mut expected = BTreeSet::new();
        for u in &agents {
            for v in &agents {
                if v.refs.iter().any(|r| r == u.agent_type()) {
                    expected.insert((u.agent_type().to_string(), v.agent_type().to_string()));
                }
            }
        }
        let got: BTreeSet<_> = g
            .edges()
            .iter()
            .map(|&(a, b)| (g.node(a).id.clone(), g.node(b).id.clone()))
            .collect();
        ensure(got == expected && g.edge_count() == expected.len(), || {
            format!("spec {i}: edges {got:?} != brute force {expected:?}")
        })?;
        let mut pg = DiGraph::<(), ()>::new();
        let idx: Vec<_> = (0..g.node_count()).map(|_| pg.add_node(())).collect();
        for &(a, b) in g.edges() {
            pg.add_edge(idx[a], idx[b], ());
        }
        ensure(!is_cyclic_directed(&pg), || format!("spec {i}: cycle found"))?;
        edges += expected.len();
    }
    Ok(format!("500 random specs, {edges} edges all match the brute-force scan, 0 cycles"))
}

// Reward golden values.

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: got {a}, expected {b} (tol {tol})"))
}

fn reward_golden() -> Outcome {
    let cfg = RewardConfig::default();
    close(RewardBreakdown::combine(1.0, 0.5, 0.5, &cfg).total, 1.70, 1e-9, "composite")?;
    let task = TaskInstance::new("t", "p").with_answer("42");
    let invalid = ExecutionRecord::invalid(&task, "d", 0);
    close(orchestration_reward(&invalid, &task, None, &cfg).unwrap().total, -1.0, 1e-9, "invalid")?;
    close(token_bonus_for(0, &cfg), 1.0, 1e-9, "B_tok(0)")?;
    close(token_bonus_for(4096, &cfg), 0.0, 1e-9, "B_tok(T)")?;
    close(token_bonus_for(9000, &cfg), 0.0, 1e-9, "B_tok(>T)")?;
    close(token_bonus_for(2048, &cfg), 0.5, 1e-9, "B_tok(2048)")?;
    close(structure_cost_counts(4, 4, &cfg), 0.375, 1e-9, "C_graph(4,4)")?;
    close(structure_cost_counts(8, 16, &cfg), 1.0, 1e-9, "C_graph saturation")?;
    let g = compile(&parse_spec(EXAMPLE_SPEC).unwrap()).unwrap();
    close(structure_cost(&g, &cfg), 0.5, 1e-9, "C_graph(example spec)")?;
    let record = ExecutionRecord {
        task_id: "t".into(),
        final_answer: "42".into(),
        correct: true,
        total_tokens: 2048,
        agent_count: 5,
        edge_count: 6,
        valid: true,
        ..ExecutionRecord::empty()
    };
    close(orchestration_reward(&record, &task, Some(&g), &cfg).unwrap().total, 1.70, 1e-9, "example spec reward")?;
    let adv = group_advantages(&[2.0, 0.0], 1e-6).unwrap();
    close(adv[0], 1.0, 1e-5, "advantage(2)")?;
    close(adv[1], -1.0, 1e-5, "advantage(0)")?;
    let flat = group_advantages(&[0.7; 4], 1e-6).unwrap();
    ensure(flat.iter().all(|a| *a == 0.0), || format!("all-equal group gave {flat:?}"))?;
    Ok("composite 1.70, invalid -1.0, B_tok and C_graph substitutions, example spec 1.70, (2,0) -> (+1,-1), flat group -> 0".into())
}

// Cache/counterfactual equivalence.

fn cache_cf_equivalence() -> Outcome {
    let start = Instant::now();
    let pool = RolePool::baseline();
    let env = Arc::new(SyntheticEnv::standard(EnvParams::default(), 2));
    let backends: [Box<dyn WorkerBackend>; 2] =
        [Box::new(ScriptedBackend::digesting()), Box::new(SyntheticBackend::new(env.clone()))];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut pairs = 0;
    let mut recomputed = 0;
    let mut affected = 0;
    while pairs < 200 {
        let spec = random_spec(&mut rng, &pool);
        let g = compile(&spec).unwrap();
        let feasible = feasible_mutations(&g, &pool);
        if feasible.is_empty() {
            continue;
        }
        let backend = backends[pairs % 2].as_ref();
        let task = env.task(pairs % 8, pairs as u64);
        let seed = rng.random();
        let cache = NodeCache::new();
        let orig = execute(&g, &task, backend, Some(&cache), seed);
        let site = sample_mutation(&SamplerState::new(), &feasible, rng.random()).unwrap();
        let m = apply_mutation(&spec, &site, &pool).map_err(|e| e.to_string())?;
        let cf_graph = compile(&m.edited).unwrap();
        let run = execute_counterfactual(&g, &orig, &cf_graph, &site.edit(), &task, backend, &cache, Schedule::Parallel)
            .map_err(|e| e.to_string())?;
        let scratch = execute(&cf_graph, &task, backend, None, seed);
        ensure(run.record.same_outcome(&scratch), || format!("pair {pairs}: cached record differs from scratch"))?;
        ensure(run.is_local(), || {
            format!("pair {pairs}: recomputed {:?} not within {:?}", run.recomputed, run.affected)
        })?;
        recomputed += run.recomputed.len();
        affected += run.affected.len();
        pairs += 1;
    }
    within(start.elapsed(), 60, "equivalence check")?;
    Ok(format!(
        "200 pairs equal from-scratch runs; {recomputed} recomputed of {affected} affected nodes; {:.2?}",
        start.elapsed()
    ))
}

// Mutation soundness.

fn field_value(spec: &orchestra::spec_model::OrchestrationSpec, agent: &str, field: SpanField) -> FieldValue {
    let a = spec.find(agent).expect("agent present");
    match field {
        SpanField::Duty => FieldValue::Scalar(a.role.duty.clone()),
        SpanField::Refs => FieldValue::List(a.refs.clone()),
        SpanField::Capacity => FieldValue::Scalar(a.capacity.as_str().to_string()),
    }
}

fn mutation_soundness() -> Outcome {
    let pool = RolePool::baseline();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = [0usize; 3];
    let mut n = 0;
    while n < 1000 {
        let spec = random_spec(&mut rng, &pool);
        let g = compile(&spec).unwrap();
        let feasible = feasible_mutations(&g, &pool);
        if feasible.is_empty() {
            continue;
        }
        let mut state = SamplerState::new();
        let u = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        state.u = u;
        state.p.copy_from_slice(&floor_softmax(&u, 1.0, 0.05).unwrap());
        let site = sample_mutation(&state, &feasible, rng.random()).unwrap();
        let m = apply_mutation(&spec, &site, &pool).map_err(|e| e.to_string())?;
        let report = validate(&m.edited, &pool);
        ensure(report.valid, || format!("mutation {n} ({site:?}) broke validity: {:?}", report.errors))?;
        let before = spec.find(&site.agent).unwrap();
        let after = m.edited.find(&site.agent).unwrap();
        match &site.detail {
            MutationDetail::Downgrade { from, to } => {
                ensure(before.capacity == *from && after.capacity == *to && to.rank() + 1 == from.rank(), || {
                    format!("mutation {n}: capacity {:?} -> {:?}", before.capacity, after.capacity)
                })?;
            }
            MutationDetail::Rollback { .. } => {
                let canonical = pool.canonical_duty(&before.role.base_role).unwrap();
                ensure(after.role.duty == canonical && before.role.duty != canonical, || {
                    format!("mutation {n}: rolled-back duty `{}`", after.role.duty)
                })?;
            }
            MutationDetail::DeleteRef { .. } => {
                ensure(m.edited.ref_count() + 1 == spec.ref_count(), || format!("mutation {n}: |E| did not drop by 1"))?;
                ensure(compile(&m.edited).unwrap().edge_count() + 1 == g.edge_count(), || {
                    format!("mutation {n}: compiled |E| did not drop by 1")
                })?;
            }
        }
        let changed = spec.agents().zip(m.edited.agents()).filter(|(a, b)| a != b).count();
        ensure(changed == 1, || format!("mutation {n}: {changed} agents changed"))?;
        let field = site.kind.field();
        let orig_slice = &m.original_text[m.span_orig.range()];
        let cf_slice = &m.edited_text[m.span_cf.range()];
        ensure(decode_fragment(orig_slice) == Some(field_value(&spec, &site.agent, field)), || {
            format!("mutation {n}: original span `{orig_slice}` does not decode to the field")
        })?;
        ensure(decode_fragment(cf_slice) == Some(field_value(&m.edited, &site.agent, field)), || {
            format!("mutation {n}: edited span `{cf_slice}` does not decode to the field")
        })?;
        counts[site.kind.index()] += 1;
        n += 1;
    }
    Ok(format!(
        "1000 mutations (dep {}, role {}, cap {}) re-validate, shift as specified, spans decode",
        counts[0], counts[1], counts[2]
    ))
}

// Sampler.

fn sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..10_000 {
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
        let p = floor_softmax(&u, 1.0, 0.05).map_err(|e| e.to_string())?;
        let sum: f64 = p.iter().sum();
        ensure(p.iter().all(|x| *x >= 0.05 - 1e-12) && (sum - 1.0).abs() <= 1e-9, || {
            format!("draw {i}: u={u:?} gave p={p:?}")
        })?;
    }
    let uniform = floor_softmax(&[0.0; 3], 1.0, 0.05).unwrap();
    ensure(uniform.iter().all(|x| (x - 1.0 / 3.0).abs() <= 1e-9), || format!("u=0 gave {uniform:?}"))?;
    let skewed = floor_softmax(&[10.0, 0.0, 0.0], 1.0, 0.05).unwrap();
    let want = [0.90, 0.05, 0.05];
    ensure(skewed.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-9), || format!("u=(10,0,0) gave {skewed:?}"))?;

    let g = compile(&parse_spec(EXAMPLE_SPEC).unwrap()).unwrap();
    let feasible = feasible_mutations(&g, &RolePool::baseline());
    let mut state = SamplerState::new();
    state.u = [0.9, 0.1, 0.5];
    state.p.copy_from_slice(&floor_softmax(&state.u, 1.0, 0.05).unwrap());
    let mut counts = [0usize; 3];
    for s in 0..30_000u64 {
        counts[sample_mutation(&state, &feasible, s).unwrap().kind.index()] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|c| *c as f64 / 30_000.0).collect();
    let worst = freq.iter().zip(state.p).map(|(f, p)| (f - p).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.01, || format!("frequencies {freq:?} vs p {:?}", state.p))?;
    Ok(format!(
        "10000 floors hold; uniform and (0.90,0.05,0.05) exact; 30000 draws max |freq-p| = {worst:.4}"
    ))
}

// Gradient checks and locality.

fn env() -> SyntheticEnv {
    SyntheticEnv::standard(EnvParams::default(), 2)
}

fn random_params(env: &SyntheticEnv, rng: &mut ChaCha8Rng) -> PolicyParams {
    let g = Grammar::new(4, 3, env.pool.clone(), OFF_POOL_ROLES, env.templates.clone(), env.families());
    let mut p = PolicyParams::zeros(g);
    for t in &mut p.theta {
        *t = rng.random_range(-1.5..1.5);
    }
    p
}

struct Pair {
    task: TaskInstance,
    orig: DecisionTrace,
    edited: DecisionTrace,
    agent: String,
    field: SpanField,
    rewards: (f64, f64),
}

fn sampled_pair(env: &SyntheticEnv, p: &PolicyParams, rng: &mut ChaCha8Rng) -> Pair {
    loop {
        let task = env.task(rng.random_range(0..8), rng.random());
        let (spec, orig) = p.sample_spec(&task, rng.random()).unwrap();
        if !validate(&spec, &env.pool).valid {
            continue;
        }
        let feasible = feasible_mutations(&compile(&spec).unwrap(), &env.pool);
        if feasible.is_empty() {
            continue;
        }
        let site = sample_mutation(&SamplerState::new(), &feasible, rng.random()).unwrap();
        let m = apply_mutation(&spec, &site, &env.pool).unwrap();
        let edited = p.score_spec(&m.edited, &task).unwrap().1;
        let a: f64 = rng.random_range(-1.0..2.5);
        let mut b: f64 = rng.random_range(-1.0..2.5);
        if (a - b).abs() < 0.02 {
            b = a - 0.25;
        }
        return Pair {
            task,
            orig,
            edited,
            agent: site.agent,
            field: site.kind.field(),
            rewards: (a, b),
        };
    }
}

impl Pair {
    fn input(&self, cfg: &CfConfig) -> CfPairInput<'_> {
        CfPairInput {
            task: &self.task,
            original: &self.orig,
            edited: &self.edited,
            agent: &self.agent,
            field: self.field,
            contrast: contrast(self.rewards.0, self.rewards.1, cfg),
        }
    }
}

fn cf_weights(cfg: &CfConfig) -> CfWeights {
    CfWeights {
        lambda: cfg.objective_weight,
        beta: cfg.beta,
    }
}

fn gradient_checks() -> Outcome {
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cf_cfg = CfConfig::default();
    let grpo_cfg = GrpoConfig::default();
    let mut worst = [0.0f64; 3];
    for point in 0..20 {
        let p = random_params(&env, &mut rng);
        let task = env.task(rng.random_range(0..8), point);

        let (spec, trace) = p.sample_spec(&task, rng.random()).unwrap();
        let analytic = p.score_gradient(&trace);
        let coords: Vec<usize> = analytic.keys().copied().collect();
        let num = numeric_grad(&p.theta, &coords, 1e-4, |t| {
            PolicyParams {
                grammar: p.grammar.clone(),
                theta: t.to_vec(),
            }
            .score_spec(&spec, &task)
            .unwrap()
            .0
        });
        let ana: Vec<f64> = coords.iter().map(|i| analytic[i]).collect();
        worst[0] = worst[0].max(relative_error(&ana, &num));

        // Sampled under `p`, so every ratio is exactly 1 at `p.theta`.
        let traces: Vec<DecisionTrace> = (0..4).map(|_| p.sample_spec(&task, rng.random()).unwrap().1).collect();
        let rollouts: Vec<Rollout<'_>> = traces
            .iter()
            .map(|t| Rollout {
                trace: t,
                advantage: rng.random_range(-1.5..1.5),
            })
            .collect();
        let analytic = grpo_gradient(&p.theta, &rollouts, None, &grpo_cfg);
        let coords: Vec<usize> = analytic.keys().copied().collect();
        let num = numeric_grad(&p.theta, &coords, 1e-4, |t| grpo_objective(t, &rollouts, None, &grpo_cfg));
        let ana: Vec<f64> = coords.iter().map(|i| analytic[i]).collect();
        worst[1] = worst[1].max(relative_error(&ana, &num));

        let pair = sampled_pair(&env, &p, &mut rng);
        let input = pair.input(&cf_cfg);
        let analytic = cf_gradient(&p.theta, &input, cf_weights(&cf_cfg)).map_err(|e| e.to_string())?;
        let coords: Vec<usize> = analytic.keys().copied().collect();
        let num = numeric_grad(&p.theta, &coords, 1e-4, |t| cf_objective(t, &input, cf_weights(&cf_cfg)).unwrap());
        let ana: Vec<f64> = coords.iter().map(|i| analytic[i]).collect();
        worst[2] = worst[2].max(relative_error(&ana, &num));
    }
    ensure(worst.iter().all(|w| *w < 1e-4), || {
        format!("max relative errors score {:.2e}, grpo {:.2e}, cf {:.2e}", worst[0], worst[1], worst[2])
    })?;
    Ok(format!(
        "20 points, max relative error: score {:.2e}, grpo {:.2e}, cf {:.2e}",
        worst[0], worst[1], worst[2]
    ))
}

fn locality() -> Outcome {
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = CfConfig::default();
    let lr = GrpoConfig::default().lr;
    let mut moved_total = 0;
    for i in 0..100 {
        let p = random_params(&env, &mut rng);
        let pair = sampled_pair(&env, &p, &mut rng);
        let input = pair.input(&cfg);
        let q = cf_step(&p, &input, cf_weights(&cfg), lr).map_err(|e| e.to_string())?;
        let mut allowed = BTreeSet::new();
        for trace in [&pair.orig, &pair.edited] {
            for &d in trace.span(&pair.agent, pair.field) {
                let row = trace.decisions[d];
                allowed.extend(row.offset..row.offset + row.width);
            }
        }
        let mut moved = 0;
        for (k, (a, b)) in p.theta.iter().zip(&q.theta).enumerate() {
            if a.to_bits() != b.to_bits() {
                ensure(allowed.contains(&k), || format!("pair {i}: parameter {k} outside the spans moved"))?;
                moved += 1;
            }
        }
        ensure(moved > 0, || format!("pair {i}: cf_step changed nothing"))?;
        moved_total += moved;
    }
    Ok(format!("100 pairs; {moved_total} span parameters moved, every other parameter bitwise unchanged"))
}

// End-to-end training trend.

fn ab_trend() -> Outcome {
    let start = Instant::now();
    let base = TrainConfig::default();
    let mut off_cfg = base.clone();
    off_cfg.counterfactual.enabled = false;
    let on = train(&base).map_err(|e| e.to_string())?.report;
    let off = train(&off_cfg).map_err(|e| e.to_string())?.report;
    let elapsed = start.elapsed();
    let reward = (on.tail_mean(100, |r| r.mean_reward), off.tail_mean(100, |r| r.mean_reward));
    let tokens = (on.tail_mean(100, |r| r.mean_tokens), off.tail_mean(100, |r| r.mean_tokens));
    let cumulative = (on.cumulative_tokens(), off.cumulative_tokens());
    let moving = on.rows.windows(2).any(|w| (w[0].p_dep, w[0].p_role, w[0].p_cap) != (w[1].p_dep, w[1].p_role, w[1].p_cap));
    let detail = format!(
        "seed {} x {} iterations; final-100 reward {:.4} (cf) vs {:.4}; final-100 tokens {:.1} (cf) vs {:.1}; cumulative tokens {} (cf) vs {}; p trajectory non-constant: {moving}; {elapsed:.1?}",
        base.seed, base.iterations, reward.0, reward.1, tokens.0, tokens.1, cumulative.0, cumulative.1
    );
    let mut failed = Vec::new();
    if on.len() != base.iterations || off.len() != base.iterations {
        failed.push("report length");
    }
    if reward.0 < reward.1 {
        failed.push("reward with CF < without");
    }
    if tokens.0 > tokens.1 {
        failed.push("tokens with CF > without");
    }
    if cumulative.0 <= cumulative.1 {
        failed.push("cumulative tokens with CF <= without");
    }
    if !moving {
        failed.push("sampler p constant");
    }
    if elapsed >= Duration::from_secs(600) {
        failed.push("runtime over 10 min");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", failed.join(", ")))
    }
}

// Suite budget and offline http backend.

fn http_stub_offline() -> Result<String, String> {
    let stub = stub::start("answer: 7", 11, 4, 200);
    ensure(stub.url.starts_with("http://127.0.0.1:"), || format!("stub not on loopback: {}", stub.url))?;
    let backend = HttpBackend::new(HttpConfig::new(
        &stub.url,
        CapacityModels {
            small: "s".into(),
            medium: "m".into(),
            large: "l".into(),
        },
    ));
    let g = compile(&parse_spec(EXAMPLE_SPEC).unwrap()).unwrap();
    let task = TaskInstance::new("t", "p").with_answer("7");
    let rec = execute(&g, &task, &backend, None, 42);
    ensure(rec.correct && rec.total_tokens == 5 * 15, || format!("stub run gave {rec:?}"))?;
    let served = stub.requests.lock().unwrap().len();
    Ok(format!("http backend served by loopback stub ({served} requests)"))
}

fn main() {
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("validator suite", validator_suite),
        ("compiler oracle", compiler_oracle),
        ("reward golden values", reward_golden),
        ("cache/counterfactual equivalence", cache_cf_equivalence),
        ("mutation soundness", mutation_soundness),
        ("mutation sampler", sampler),
        ("gradient checks", gradient_checks),
        ("cf_step locality", locality),
    ];
    let mut failures = 0;
    let report = |name: &str, outcome: &Outcome, failures: &mut usize| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(why) => {
            *failures += 1;
            println!("FAIL {name}: {why}");
        }
    };
    let suite_start = Instant::now();
    for (name, check) in &checks {
        let outcome = catch_unwind(*check).unwrap_or_else(|_| Err("panicked".into()));
        report(name, &outcome, &mut failures);
    }
    let http = catch_unwind(http_stub_offline).unwrap_or_else(|_| Err("panicked".into()));
    let suite = suite_start.elapsed();

    let ab = catch_unwind(ab_trend).unwrap_or_else(|_| Err("panicked".into()));
    report("end-to-end training trend (A/B)", &ab, &mut failures);

    let budget = http.and_then(|h| {
        within(suite, 300, "acceptance checks without the A/B run")?;
        Ok(format!("{h}; checks without the A/B run took {suite:.1?} (limit 5 min)"))
    });
    report("offline suite budget", &budget, &mut failures);

    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
