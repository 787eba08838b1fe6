use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use orchestra::counterfactual::{
    apply_mutation, feasible_mutations, sample_mutation, CounterfactualPair, MutationKind, SamplerState,
};
use orchestra::exec_engine::{
    execute, write_jsonl, ExecutionRecord, HttpBackend, NodeCache, ScriptedBackend, SyntheticBackend, WorkerBackend,
};
use orchestra::graph::{compile as compile_graph, OrchestrationGraph};
use orchestra::policy_sim::{train, SyntheticEnv};
use orchestra::reward::orchestration_reward;
use orchestra::spec_model::{parse_spec, validate_text, OrchestrationSpec, RolePool, TaskInstance};

use crate::config::FileConfig;
use crate::{BackendKind, CliError, KindArg};

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn stdout_err(e: io::Error) -> CliError {
    CliError::Env(format!("stdout: {e}"))
}

/// Parse and validate, printing the report to stderr on failure.
fn load_spec(path: &Path, pool: &RolePool) -> Result<(OrchestrationSpec, OrchestrationGraph), CliError> {
    let text = read(path)?;
    let report = validate_text(&text, pool);
    if !report.valid {
        eprintln!("{}", report.to_json());
        return Err(CliError::Domain(format!("{}: invalid spec", path.display())));
    }
    let spec = parse_spec(&text).map_err(|e| CliError::Domain(e.to_string()))?;
    let graph = compile_graph(&spec).map_err(|e| CliError::Domain(e.to_string()))?;
    Ok((spec, graph))
}

pub fn validate(path: &Path) -> Result<(), CliError> {
    let report = validate_text(&read(path)?, &RolePool::baseline());
    println!("{}", report.to_json());
    if report.valid {
        Ok(())
    } else {
        Err(CliError::Domain(format!("invalid spec: {}", report.rule_ids().join(", "))))
    }
}

pub fn compile(path: &Path, dot: bool) -> Result<(), CliError> {
    let (_, g) = load_spec(path, &RolePool::baseline())?;
    if dot {
        print!("{}", g.to_dot());
    } else {
        println!("{}", serde_json::to_string_pretty(&g.to_json()).expect("graph serializes"));
    }
    Ok(())
}

fn read_tasks(path: &Path) -> Result<Vec<TaskInstance>, CliError> {
    let text = read(path)?;
    let bad = |e: serde_json::Error| CliError::Domain(format!("{}: {e}", path.display()));
    let tasks: Vec<TaskInstance> = match serde_json::from_str::<TaskInstance>(&text) {
        Ok(t) => vec![t],
        Err(_) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(bad))
            .collect::<Result<_, _>>()?,
    };
    if tasks.is_empty() {
        return Err(CliError::Domain(format!("{}: no tasks", path.display())));
    }
    for t in &tasks {
        t.check().map_err(CliError::Domain)?;
    }
    Ok(tasks)
}

fn backend(cfg: &FileConfig, kind: BackendKind) -> Result<Box<dyn WorkerBackend>, CliError> {
    Ok(match kind {
        BackendKind::Scripted => match &cfg.script {
            Some(path) => Box::new(
                ScriptedBackend::from_json(&read(path)?)
                    .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?,
            ),
            None => Box::new(ScriptedBackend::digesting()),
        },
        BackendKind::Synthetic => {
            let t = &cfg.train;
            let env = SyntheticEnv::standard(t.env.clone(), t.policy.templates);
            Box::new(SyntheticBackend::new(Arc::new(env)))
        }
        BackendKind::Http => {
            let http = cfg
                .http
                .clone()
                .ok_or_else(|| CliError::Domain("the http backend needs an [http] section in --config".into()))?;
            Box::new(HttpBackend::new(http))
        }
    })
}

pub fn run(
    cfg: &FileConfig,
    spec_path: &Path,
    task_path: &Path,
    kind: BackendKind,
    cache_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (_, g) = load_spec(spec_path, &RolePool::baseline())?;
    let tasks = read_tasks(task_path)?;
    let backend = backend(cfg, kind)?;
    let cache = match cache_path {
        Some(p) => Some(NodeCache::load(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let seed = cfg.train.seed;
    let mut records: Vec<ExecutionRecord> = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut rec = execute(&g, task, backend.as_ref(), cache.as_ref(), seed);
        if let Some(f) = &rec.failure {
            eprintln!("{}: node `{}` failed: {}", task.id, f.node, f.message);
        }
        if task.answer_key.is_some() {
            let r = orchestration_reward(&rec, task, Some(&g), &cfg.train.reward)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            eprintln!(
                "{}: answer {:?} correct={} reward={:.4} (r_task {}, b_tok {:.4}, c_graph {:.4})",
                task.id, rec.final_answer, rec.correct, r.total, r.r_task, r.b_tok, r.c_graph
            );
            rec.reward = Some(r);
        } else {
            eprintln!("{}: answer {:?}", task.id, rec.final_answer);
        }
        records.push(rec);
    }
    if let (Some(cache), Some(p)) = (&cache, cache_path) {
        cache.save(p).map_err(|e| CliError::io(p, e))?;
    }
    match out {
        Some(p) => {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &records).expect("writing to memory");
            write_file(p, &buf)?;
        }
        None => write_jsonl(io::stdout().lock(), &records).map_err(stdout_err)?,
    }
    // A worker that produced a bad answer is a normal outcome; an
    // unreachable endpoint is not.
    if records.iter().any(|r| r.failure.as_ref().is_some_and(|f| f.environmental)) {
        return Err(CliError::Env("worker calls failed; see the records".into()));
    }
    Ok(())
}

pub fn mutate(cfg: &FileConfig, spec_path: &Path, kind: Option<KindArg>, out: &Path) -> Result<(), CliError> {
    let pool = RolePool::baseline();
    let (spec, g) = load_spec(spec_path, &pool)?;
    let mut feasible = feasible_mutations(&g, &pool);
    if let Some(k) = kind {
        let k = match k {
            KindArg::Dep => MutationKind::DependencyDeletion,
            KindArg::Role => MutationKind::RoleRollback,
            KindArg::Cap => MutationKind::CapacityDowngrade,
        };
        feasible = feasible.restrict(k);
    }
    if feasible.is_empty() {
        return Err(CliError::Domain("infeasible mutation".into()));
    }
    let site = sample_mutation(&SamplerState::new(), &feasible, cfg.train.seed)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    let m = apply_mutation(&spec, &site, &pool).map_err(|e| CliError::Domain(e.to_string()))?;
    write_file(out, m.edited_text.as_bytes())?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", CounterfactualPair::from_applied(&m, None).to_json_line()).map_err(stdout_err)?;
    Ok(())
}

pub fn train_sim(cfg: &FileConfig, out: &Path) -> Result<(), CliError> {
    let t = &cfg.train;
    let run = train(t).map_err(|e| CliError::Domain(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    run.report.save(out).map_err(|e| CliError::Env(format!("{}: {e}", out.display())))?;
    let report = &run.report;
    let summary = serde_json::json!({
        "seed": t.seed,
        "cf": t.counterfactual.enabled,
        "iterations": report.len(),
        "final_mean_reward": report.tail_mean(100, |r| r.mean_reward),
        "final_mean_tokens": report.tail_mean(100, |r| r.mean_tokens),
        "cumulative_tokens": report.cumulative_tokens(),
        "out": out.display().to_string(),
    });
    let mut stdout = BufWriter::new(io::stdout().lock());
    writeln!(stdout, "{summary}").map_err(stdout_err)?;
    Ok(())
}
