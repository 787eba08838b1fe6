//! Layered orchestration DAG compiled from a validated specification.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::reward::RewardConfig;
use crate::spec_model::{spec_digest, validate_structure, CapacityLevel, Issue, OrchestrationSpec, RoleSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("cannot compile an invalid specification ({} error(s), first: {})", .0.len(), .0[0])]
    InvalidSpec(Vec<Issue>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown edge `{0}` -> `{1}`")]
    UnknownEdge(String, String),
}

/// One agent of the compiled graph. The node id is the agent type, which
/// validation guarantees to be unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub role: RoleSpec,
    pub capacity: CapacityLevel,
    pub step: usize,
    pub position: usize,
}

/// An edited graph element, for recomputation analysis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edit {
    Node(String),
    Edge { from: String, to: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrchestrationGraph {
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    layers: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    spec_digest: String,
}

pub fn compile(spec: &OrchestrationSpec) -> Result<OrchestrationGraph, GraphError> {
    let issues = validate_structure(spec);
    if !issues.is_empty() {
        return Err(GraphError::InvalidSpec(issues));
    }
    let mut nodes = Vec::with_capacity(spec.agent_count());
    let mut layers = Vec::with_capacity(spec.steps.len());
    let mut index = HashMap::new();
    for (si, step) in spec.steps.iter().enumerate() {
        let mut layer = Vec::with_capacity(step.agents.len());
        for (pi, agent) in step.agents.iter().enumerate() {
            index.insert(agent.role.agent_type.clone(), nodes.len());
            layer.push(nodes.len());
            nodes.push(Node {
                id: agent.role.agent_type.clone(),
                role: agent.role.clone(),
                capacity: agent.capacity,
                step: si,
                position: pi,
            });
        }
        layers.push(layer);
    }
    let mut edges = Vec::with_capacity(spec.ref_count());
    let mut parents = vec![Vec::new(); nodes.len()];
    let mut children = vec![Vec::new(); nodes.len()];
    for (v, agent) in spec.agents().enumerate() {
        for r in &agent.refs {
            let u = index[r.as_str()];
            edges.push((u, v));
            parents[v].push(u);
            children[u].push(v);
        }
    }
    Ok(OrchestrationGraph {
        nodes,
        edges,
        parents,
        children,
        layers,
        index,
        spec_digest: spec_digest(spec),
    })
}

impl OrchestrationGraph {
    /// SHA-256 of the canonical serialization of the compiled spec.
    pub fn spec_digest(&self) -> &str {
        &self.spec_digest
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(from, to)` node indices.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.index_of(from), self.index_of(to)) {
            (Some(u), Some(v)) => self.parents[v].contains(&u),
            _ => false,
        }
    }

    /// Parent indices of `idx`, in declared `ref` order.
    pub fn parent_indices(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn child_indices(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    /// Parents of `id` in declared `ref` order.
    pub fn parents(&self, id: &str) -> Result<Vec<&str>, GraphError> {
        let v = self
            .index_of(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
        Ok(self.parents[v]
            .iter()
            .map(|&u| self.nodes[u].id.as_str())
            .collect())
    }

    /// `idx` and every node reachable from it.
    pub fn descendants_inclusive(&self, idx: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([idx]);
        let mut queue = VecDeque::from([idx]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.children[u] {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Nodes whose inputs may change under `edit`: the edited node and its
    /// descendants, or for a removed edge `(u, v)`, `v` and its descendants.
    pub fn affected_set(&self, edit: &Edit) -> Result<BTreeSet<usize>, GraphError> {
        match edit {
            Edit::Node(id) => {
                let v = self
                    .index_of(id)
                    .ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
                Ok(self.descendants_inclusive(v))
            }
            Edit::Edge { from, to } => {
                if !self.has_edge(from, to) {
                    return Err(GraphError::UnknownEdge(from.clone(), to.clone()));
                }
                Ok(self.descendants_inclusive(self.index[to.as_str()]))
            }
        }
    }

    pub fn affected_ids(&self, edit: &Edit) -> Result<BTreeSet<String>, GraphError> {
        Ok(self
            .affected_set(edit)?
            .into_iter()
            .map(|i| self.nodes[i].id.clone())
            .collect())
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph orchestration {\n  rankdir=LR;\n");
        for (si, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_step{si} {{\n    label=\"step {}\";", si + 1);
            for &i in layer {
                let n = &self.nodes[i];
                let _ = writeln!(
                    out,
                    "    \"{}\" [label=\"{}\\n{} ({})\"];",
                    n.id, n.id, n.role.base_role, n.capacity
                );
            }
            out.push_str("  }\n");
        }
        for &(u, v) in &self.edges {
            let _ = writeln!(out, "  \"{}\" -> \"{}\";", self.nodes[u].id, self.nodes[v].id);
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            nodes: self
                .nodes
                .iter()
                .map(|n| GraphJsonNode {
                    id: n.id.clone(),
                    base_role: n.role.base_role.clone(),
                    capacity: n.capacity,
                    step: n.step,
                    position: n.position,
                    parents: self.parents[self.index[&n.id]]
                        .iter()
                        .map(|&u| self.nodes[u].id.clone())
                        .collect(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(u, v)| (self.nodes[u].id.clone(), self.nodes[v].id.clone()))
                .collect(),
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&i| self.nodes[i].id.clone()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphJsonNode {
    pub id: String,
    pub base_role: String,
    pub capacity: CapacityLevel,
    pub step: usize,
    pub position: usize,
    pub parents: Vec<String>,
}

/// JSON adjacency export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphJson {
    pub nodes: Vec<GraphJsonNode>,
    pub edges: Vec<(String, String)>,
    pub layers: Vec<Vec<String>>,
}

/// Structural cost in `[0, 1]`: the mean of the agent and dependency counts,
/// each normalized by its configured maximum and clamped.
pub fn structure_cost(g: &OrchestrationGraph, cfg: &RewardConfig) -> f64 {
    structure_cost_counts(g.node_count(), g.edge_count(), cfg)
}

pub fn structure_cost_counts(agents: usize, edges: usize, cfg: &RewardConfig) -> f64 {
    let v = (agents as f64 / cfg.max_agents as f64).clamp(0.0, 1.0);
    let e = (edges as f64 / cfg.max_edges as f64).clamp(0.0, 1.0);
    ((v + e) / 2.0).clamp(0.0, 1.0)
}
