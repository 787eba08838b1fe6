//! Layer-by-layer execution of a compiled orchestration graph.
//!
//! Nodes of one layer run concurrently (with the `parallel` feature) and
//! each worker call is memoized in an optional [`NodeCache`]. The resulting
//! [`ExecutionRecord`] lists nodes in `(step, position)` order whatever the
//! completion order was.

mod cache;
mod http;
mod scripted;

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Edit, GraphError, OrchestrationGraph};
use crate::reward::{answers_match, RewardBreakdown};
use crate::spec_model::{CapacityLevel, RoleSpec, TaskInstance};

pub use cache::{CacheKey, NodeCache};
pub use http::{CapacityModels, HttpBackend, HttpConfig};
pub use scripted::{Fallback, ScriptAction, ScriptRule, ScriptTable, ScriptedBackend};
pub use crate::policy_sim::SyntheticBackend;

/// Input of one worker invocation.
#[derive(Debug, Clone)]
pub struct WorkerCall<'a> {
    pub task: &'a TaskInstance,
    pub role: &'a RoleSpec,
    pub capacity: CapacityLevel,
    /// `(node id, output)` in the node's declared `ref` order.
    pub parent_outputs: Vec<(&'a str, &'a str)>,
}

impl WorkerCall<'_> {
    /// Parent outputs joined by newlines, or the task prompt for source nodes.
    pub fn input_text(&self) -> String {
        if self.parent_outputs.is_empty() {
            self.task.prompt.clone()
        } else {
            self.parent_outputs
                .iter()
                .map(|(_, o)| *o)
                .collect::<Vec<_>>()
                .join("\n")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkerResult {
    pub output: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl WorkerResult {
    pub fn new(output: impl Into<String>, tokens_in: u64, tokens_out: u64) -> Self {
        Self {
            output: output.into(),
            tokens_in,
            tokens_out,
        }
    }

    pub fn tokens(&self) -> u64 {
        self.tokens_in + self.tokens_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkerError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("{0}")]
    Worker(String),
}

impl WorkerError {
    /// Whether the failure came from the environment (network, endpoint)
    /// rather than from the worker's own behavior.
    pub fn is_environmental(&self) -> bool {
        !matches!(self, WorkerError::Worker(_))
    }
}

/// A worker model. Implementations must be safe to call from several
/// threads and must be deterministic given `(call, seed)`.
pub trait WorkerBackend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, call: &WorkerCall<'_>, seed: u64) -> Result<WorkerResult, WorkerError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Ok,
    Failed,
    /// Not run because an ancestor failed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: String,
    pub status: NodeStatus,
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<WorkerResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFailure {
    pub node: String,
    pub message: String,
    /// The call failed for network or endpoint reasons.
    #[serde(default)]
    pub environmental: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub task_id: String,
    pub spec_digest: String,
    pub valid: bool,
    pub final_answer: String,
    pub correct: bool,
    pub total_tokens: u64,
    pub agent_count: usize,
    pub edge_count: usize,
    pub per_node: Vec<NodeRecord>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<NodeFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

impl ExecutionRecord {
    pub fn empty() -> Self {
        Self {
            task_id: String::new(),
            spec_digest: String::new(),
            valid: true,
            final_answer: String::new(),
            correct: false,
            total_tokens: 0,
            agent_count: 0,
            edge_count: 0,
            per_node: Vec::new(),
            seed: 0,
            failure: None,
            reward: None,
        }
    }

    /// Record for a specification that failed validation and was not run.
    pub fn invalid(task: &TaskInstance, spec_digest: impl Into<String>, seed: u64) -> Self {
        Self {
            task_id: task.id.clone(),
            spec_digest: spec_digest.into(),
            valid: false,
            seed,
            ..Self::empty()
        }
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.per_node.iter().find(|n| n.node == id)
    }

    /// Tokens of nodes that actually called a worker in this run.
    pub fn fresh_tokens(&self) -> u64 {
        self.per_node
            .iter()
            .filter(|n| !n.cache_hit)
            .filter_map(|n| n.result.as_ref())
            .map(WorkerResult::tokens)
            .sum()
    }

    /// Nodes that called a worker (successfully or not) in this run.
    pub fn recomputed(&self) -> BTreeSet<String> {
        self.per_node
            .iter()
            .filter(|n| !n.cache_hit && n.status != NodeStatus::Skipped)
            .map(|n| n.node.clone())
            .collect()
    }

    /// Equality that ignores cache-hit flags and attached rewards.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            r.reward = None;
            for n in &mut r.per_node {
                n.cache_hit = false;
            }
            r
        };
        strip(self) == strip(other)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a ExecutionRecord>,
) -> io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Intra-layer scheduling strategy. `Permuted` runs each layer
/// sequentially in a seeded random order, for schedule-independence checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Parallel,
    Sequential,
    Permuted(u64),
}

/// The answer carried by a worker output: the text after the first line
/// starting with `answer:`, otherwise the whole trimmed output.
pub fn extract_answer(output: &str) -> &str {
    output
        .lines()
        .find_map(|l| l.trim_start().strip_prefix("answer:"))
        .map(str::trim)
        .unwrap_or_else(|| output.trim())
}

/// Combine the outputs of the last layer, given in position order. One
/// output is returned verbatim; several are decided by majority over
/// their extracted answers, ties going to the lowest position.
pub fn aggregate(outputs: &[&str]) -> String {
    match outputs {
        [] => String::new(),
        [single] => (*single).to_string(),
        many => {
            let answers: Vec<&str> = many.iter().map(|o| extract_answer(o)).collect();
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for a in &answers {
                *counts.entry(a).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            answers
                .iter()
                .find(|a| counts[*a] == best)
                .map(|a| a.to_string())
                .unwrap_or_default()
        }
    }
}

pub fn execute(
    g: &OrchestrationGraph,
    task: &TaskInstance,
    backend: &dyn WorkerBackend,
    cache: Option<&NodeCache>,
    seed: u64,
) -> ExecutionRecord {
    execute_with(g, task, backend, cache, seed, Schedule::default())
}

enum Slot {
    Pending,
    Skipped,
    Done { result: WorkerResult, hit: bool },
    Failed { message: String, environmental: bool },
}

pub fn execute_with(
    g: &OrchestrationGraph,
    task: &TaskInstance,
    backend: &dyn WorkerBackend,
    cache: Option<&NodeCache>,
    seed: u64,
    schedule: Schedule,
) -> ExecutionRecord {
    let n = g.node_count();
    let mut slots: Vec<Slot> = (0..n).map(|_| Slot::Pending).collect();
    let mut order_rng = match schedule {
        Schedule::Permuted(s) => Some(ChaCha8Rng::seed_from_u64(s)),
        _ => None,
    };

    for layer in g.layers() {
        // Resolve skips, cache hits and in-layer duplicates up front so that
        // hit flags do not depend on completion order.
        let mut jobs: Vec<(usize, CacheKey)> = Vec::new();
        let mut dup_of: Vec<(usize, usize)> = Vec::new();
        let mut first_job: HashMap<CacheKey, usize> = HashMap::new();
        for &v in layer {
            let blocked = g
                .parent_indices(v)
                .iter()
                .any(|&u| !matches!(slots[u], Slot::Done { .. }));
            if blocked {
                slots[v] = Slot::Skipped;
                continue;
            }
            let key = CacheKey::for_call(&make_call(g, task, &slots, v));
            if let Some(cache) = cache {
                if let Some(result) = cache.get(seed, &key) {
                    slots[v] = Slot::Done { result, hit: true };
                    continue;
                }
                if let Some(&first) = first_job.get(&key) {
                    dup_of.push((v, first));
                    continue;
                }
                first_job.insert(key, v);
            }
            jobs.push((v, key));
        }

        let run = |&(v, _): &(usize, CacheKey)| backend.call(&make_call(g, task, &slots, v), seed);
        let results: Vec<Result<WorkerResult, WorkerError>> = match schedule {
            Schedule::Parallel => crate::par::map(true, &jobs, run),
            Schedule::Sequential => jobs.iter().map(run).collect(),
            Schedule::Permuted(_) => {
                let mut order: Vec<usize> = (0..jobs.len()).collect();
                order.shuffle(order_rng.as_mut().expect("permuted rng"));
                let mut out: Vec<Option<Result<WorkerResult, WorkerError>>> =
                    (0..jobs.len()).map(|_| None).collect();
                for i in order {
                    out[i] = Some(run(&jobs[i]));
                }
                out.into_iter().map(|r| r.expect("every job ran")).collect()
            }
        };

        for ((v, key), res) in jobs.into_iter().zip(results) {
            slots[v] = match res {
                Ok(result) => {
                    if let Some(cache) = cache {
                        cache.insert(seed, key, result.clone());
                    }
                    Slot::Done { result, hit: false }
                }
                Err(e) => Slot::Failed {
                    message: e.to_string(),
                    environmental: e.is_environmental(),
                },
            };
        }
        for (v, first) in dup_of {
            slots[v] = match &slots[first] {
                Slot::Done { result, .. } => Slot::Done {
                    result: result.clone(),
                    hit: true,
                },
                Slot::Failed { message, environmental } => Slot::Failed {
                    message: message.clone(),
                    environmental: *environmental,
                },
                _ => unreachable!("first occurrence resolved above"),
            };
        }
    }

    assemble(g, task, seed, slots)
}

fn make_call<'a>(
    g: &'a OrchestrationGraph,
    task: &'a TaskInstance,
    slots: &'a [Slot],
    v: usize,
) -> WorkerCall<'a> {
    let node = g.node(v);
    let parent_outputs = g
        .parent_indices(v)
        .iter()
        .map(|&u| match &slots[u] {
            Slot::Done { result, .. } => (g.node(u).id.as_str(), result.output.as_str()),
            _ => unreachable!("parents of a runnable node are done"),
        })
        .collect();
    WorkerCall {
        task,
        role: &node.role,
        capacity: node.capacity,
        parent_outputs,
    }
}

fn assemble(g: &OrchestrationGraph, task: &TaskInstance, seed: u64, slots: Vec<Slot>) -> ExecutionRecord {
    let mut failure = None;
    let mut per_node = Vec::with_capacity(slots.len());
    for (v, slot) in slots.into_iter().enumerate() {
        let node = g.node(v).id.clone();
        per_node.push(match slot {
            Slot::Done { result, hit } => NodeRecord {
                node,
                status: NodeStatus::Ok,
                cache_hit: hit,
                result: Some(result),
            },
            Slot::Failed { message, environmental } => {
                failure.get_or_insert(NodeFailure {
                    node: node.clone(),
                    message,
                    environmental,
                });
                NodeRecord {
                    node,
                    status: NodeStatus::Failed,
                    cache_hit: false,
                    result: None,
                }
            }
            Slot::Skipped | Slot::Pending => NodeRecord {
                node,
                status: NodeStatus::Skipped,
                cache_hit: false,
                result: None,
            },
        });
    }
    let total_tokens = per_node
        .iter()
        .filter_map(|n| n.result.as_ref())
        .map(WorkerResult::tokens)
        .sum();
    let final_answer = if failure.is_some() {
        String::new()
    } else {
        let last = g.layers().last().map(Vec::as_slice).unwrap_or(&[]);
        let outputs: Vec<&str> = last
            .iter()
            .filter_map(|&v| per_node[v].result.as_ref())
            .map(|r| r.output.as_str())
            .collect();
        aggregate(&outputs)
    };
    let correct = failure.is_none()
        && task
            .answer_key
            .as_deref()
            .is_some_and(|k| answers_match(extract_answer(&final_answer), k));
    ExecutionRecord {
        task_id: task.id.clone(),
        spec_digest: g.spec_digest().to_string(),
        valid: true,
        final_answer,
        correct,
        total_tokens,
        agent_count: g.node_count(),
        edge_count: g.edge_count(),
        per_node,
        seed,
        failure,
        reward: None,
    }
}

/// Outcome of re-executing an edited graph against a warm cache.
#[derive(Debug, Clone)]
pub struct CounterfactualRun {
    pub record: ExecutionRecord,
    /// Nodes of the edited graph that called a worker.
    pub recomputed: BTreeSet<String>,
    /// Nodes whose inputs may differ from the original run.
    pub affected: BTreeSet<String>,
}

impl CounterfactualRun {
    pub fn is_local(&self) -> bool {
        self.recomputed.is_subset(&self.affected)
    }
}

/// Execute `cf_graph`, obtained from `orig_graph` by `edit`, reusing the
/// cache that produced `orig_record` and its seed. Node edits are given
/// by node id; edge edits name the removed edge of the original graph.
#[allow(clippy::too_many_arguments)]
pub fn execute_counterfactual(
    orig_graph: &OrchestrationGraph,
    orig_record: &ExecutionRecord,
    cf_graph: &OrchestrationGraph,
    edit: &Edit,
    task: &TaskInstance,
    backend: &dyn WorkerBackend,
    cache: &NodeCache,
    schedule: Schedule,
) -> Result<CounterfactualRun, GraphError> {
    let affected = orig_graph.affected_ids(edit)?;
    let record = execute_with(cf_graph, task, backend, Some(cache), orig_record.seed, schedule);
    let recomputed = record.recomputed();
    Ok(CounterfactualRun {
        record,
        recomputed,
        affected,
    })
}
