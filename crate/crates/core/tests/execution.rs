mod common;

use std::sync::Arc;

use common::{random_spec, stub, EXAMPLE_SPEC};
use orchestra::counterfactual::{apply_mutation, feasible_mutations, sample_mutation, SamplerState};
use orchestra::exec_engine::{
    aggregate, execute, execute_counterfactual, execute_with, CapacityModels, HttpBackend, HttpConfig, NodeCache,
    NodeStatus, Schedule, ScriptTable, ScriptedBackend, SyntheticBackend, WorkerBackend,
};
use orchestra::graph::compile;
use orchestra::policy_sim::{EnvParams, SyntheticEnv};
use orchestra::spec_model::{parse_spec, RolePool, TaskInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic() -> SyntheticBackend {
    SyntheticBackend::new(Arc::new(SyntheticEnv::standard(EnvParams::default(), 2)))
}

fn models() -> CapacityModels {
    CapacityModels {
        small: "tiny-model".into(),
        medium: "mid-model".into(),
        large: "big-model".into(),
    }
}

#[test]
fn http_backend_reads_stub_completion() {
    let stub = stub::start("answer: 12", 31, 7, 200);
    let backend = HttpBackend::new(HttpConfig::new(&stub.url, models()));
    let spec = parse_spec(EXAMPLE_SPEC).unwrap();
    let g = compile(&spec).unwrap();
    let task = TaskInstance::new("t1", "How many apples?").with_answer("12");
    let rec = execute_with(&g, &task, &backend, None, 42, Schedule::Sequential);
    assert!(rec.failure.is_none(), "{:?}", rec.failure);
    assert_eq!(rec.final_answer, "answer: 12");
    assert!(rec.correct);
    assert_eq!(rec.total_tokens, 5 * 38);
    for n in &rec.per_node {
        let r = n.result.as_ref().unwrap();
        assert_eq!((r.tokens_in, r.tokens_out), (31, 7));
    }
    let reqs = stub.requests.lock().unwrap();
    assert_eq!(reqs.len(), 5);
    let first = &reqs[0];
    assert_eq!(first["model"], "tiny-model");
    let messages = first["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 2);
    assert!(messages[0]["content"].as_str().unwrap().contains("quantity_extractor"));
    assert!(messages[1]["content"].as_str().unwrap().contains("How many apples?"));
}

#[test]
fn http_error_status_fails_the_node() {
    let stub = stub::start("", 0, 0, 500);
    let backend = HttpBackend::new(HttpConfig {
        retries: 0,
        ..HttpConfig::new(&stub.url, models())
    });
    let g = compile(&parse_spec(EXAMPLE_SPEC).unwrap()).unwrap();
    let rec = execute(&g, &TaskInstance::new("t", "p").with_answer("1"), &backend, None, 0);
    let failure = rec.failure.as_ref().expect("node failure");
    assert_eq!(failure.node, "extract_quantities");
    assert_eq!(rec.final_answer, "");
    assert!(!rec.correct);
    assert!(rec.per_node[1..].iter().all(|n| n.status == NodeStatus::Skipped));
}

#[test]
fn synthetic_runs_are_byte_identical() {
    let g = compile(&parse_spec(EXAMPLE_SPEC).unwrap()).unwrap();
    let env = SyntheticEnv::standard(EnvParams::default(), 2);
    let task = env.task(1, 7);
    let a = execute(&g, &task, &synthetic(), None, 42);
    let b = execute(&g, &task, &synthetic(), None, 42);
    assert_eq!(a.to_json_line(), b.to_json_line());
    assert_eq!(a.total_tokens, 120 * 2 + 260 * 3);
}

#[test]
fn aggregation_rules() {
    assert_eq!(aggregate(&["only output"]), "only output");
    assert_eq!(aggregate(&["answer: A", "answer: A", "answer: B"]), "A");
    assert_eq!(aggregate(&["answer: A", "answer: B"]), "A");
    assert_eq!(aggregate(&["answer: B", "answer: A", "answer: A"]), "A");
}

#[test]
fn cache_and_schedule_do_not_change_outcomes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pool = RolePool::baseline();
    let backends: [Box<dyn WorkerBackend>; 2] = [Box::new(ScriptedBackend::digesting()), Box::new(synthetic())];
    let env = SyntheticEnv::standard(EnvParams::default(), 2);
    for i in 0..100 {
        let g = compile(&random_spec(&mut rng, &pool)).unwrap();
        let task = env.task(i % 8, i as u64);
        let seed = rng.random();
        for b in &backends {
            let plain = execute_with(&g, &task, b.as_ref(), None, seed, Schedule::Sequential);
            let cache = NodeCache::new();
            let cached = execute(&g, &task, b.as_ref(), Some(&cache), seed);
            let again = execute(&g, &task, b.as_ref(), Some(&cache), seed);
            let permuted = execute_with(&g, &task, b.as_ref(), None, seed, Schedule::Permuted(rng.random()));
            assert!(plain.same_outcome(&cached));
            assert!(plain.same_outcome(&again));
            assert_eq!(plain, permuted);
            assert!(again.per_node.iter().all(|n| n.cache_hit));
            let sum: u64 = plain.per_node.iter().filter_map(|n| n.result.as_ref()).map(|r| r.tokens()).sum();
            assert_eq!(plain.total_tokens, sum);
            assert_eq!(again.total_tokens, plain.total_tokens);
            assert_eq!(again.fresh_tokens(), 0);
        }
    }
}

#[test]
fn counterfactual_reexecution_matches_scratch() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let pool = RolePool::baseline();
    let backend = ScriptedBackend::digesting();
    let mut checked = 0;
    while checked < 60 {
        let spec = random_spec(&mut rng, &pool);
        let g = compile(&spec).unwrap();
        let feasible = feasible_mutations(&g, &pool);
        if feasible.is_empty() {
            continue;
        }
        let task = TaskInstance::new(format!("t{checked}"), "prompt").with_answer("x");
        let cache = NodeCache::new();
        let seed = rng.random();
        let orig = execute(&g, &task, &backend, Some(&cache), seed);
        let site = sample_mutation(&SamplerState::new(), &feasible, rng.random()).unwrap();
        let m = apply_mutation(&spec, &site, &pool).unwrap();
        let cf_graph = compile(&m.edited).unwrap();
        let run = execute_counterfactual(&g, &orig, &cf_graph, &site.edit(), &task, &backend, &cache, Schedule::Parallel)
            .unwrap();
        let scratch = execute(&cf_graph, &task, &backend, None, seed);
        assert!(run.record.same_outcome(&scratch));
        assert!(run.is_local(), "{:?} not within {:?}", run.recomputed, run.affected);
        checked += 1;
    }
}

#[test]
fn script_table_round_trips_json() {
    let table = ScriptTable::default();
    let text = serde_json::to_string(&table).unwrap();
    assert!(ScriptedBackend::from_json(&text).is_ok());
}
