//! The YAML orchestration-specification language.
//!
//! A specification is a list of steps; each step holds one or more agent
//! entries carrying a role (`type`, `base_role`, `duty`), dependency
//! references to agents of earlier steps (`ref`) and a worker capacity.
//!
//! ```text
//! defaults:
//!   capacity: medium
//! steps:
//!   - agents:
//!       - type: extract_quantities
//!         base_role: quantity_extractor
//!         duty: Extract known quantities.
//!         ref: []
//!         capacity: small
//! ```

mod parse;
mod pool;
mod serialize;
mod validate;
mod yaml;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use parse::{parse_spec, parse_spec_lenient, ParseError, ParseOutcome};
pub use pool::{PoolError, RolePool};
pub use serialize::{serialize, FieldSpan, SerializedSpec, SpanField};
pub use validate::{rules, validate, validate_structure, validate_text, Issue, ValidationReport};

/// One task instance handed to the orchestration.
///
/// For the synthetic environment the `id` has the form `<family>#<n>`; the
/// part before `#` is the task family used to condition policies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_key: Option<String>,
}

impl TaskInstance {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            answer_key: None,
        }
    }

    pub fn with_answer(mut self, key: impl Into<String>) -> Self {
        self.answer_key = Some(key.into());
        self
    }

    /// Task family: the prefix of `id` before the first `#`.
    pub fn family(&self) -> &str {
        self.id.split('#').next().unwrap_or(&self.id)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("task id must be non-empty".into());
        }
        if self.prompt.trim().is_empty() {
            return Err("task prompt must be non-empty".into());
        }
        Ok(())
    }
}

/// Worker capacity tier, ordered `small < medium < large`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum CapacityLevel {
    Small,
    Medium,
    Large,
}

impl CapacityLevel {
    pub const ALL: [CapacityLevel; 3] = [Self::Small, Self::Medium, Self::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn from_rank(rank: usize) -> Option<Self> {
        Self::ALL.get(rank).copied()
    }

    /// One level lower, `None` for `small`.
    pub fn downgrade(self) -> Option<Self> {
        self.rank().checked_sub(1).and_then(Self::from_rank)
    }
}

impl fmt::Display for CapacityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown capacity token `{0}` (expected small, medium or large)")]
pub struct UnknownCapacity(pub String);

impl FromStr for CapacityLevel {
    type Err = UnknownCapacity;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "large" => Ok(Self::Large),
            other => Err(UnknownCapacity(other.to_string())),
        }
    }
}

/// Role of one agent: task-specific identity, inherited base role and
/// customized duty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleSpec {
    pub agent_type: String,
    pub base_role: String,
    pub duty: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentEntry {
    pub role: RoleSpec,
    pub refs: Vec<String>,
    pub capacity: CapacityLevel,
}

impl AgentEntry {
    pub fn new(
        agent_type: impl Into<String>,
        base_role: impl Into<String>,
        duty: impl Into<String>,
        refs: Vec<String>,
        capacity: CapacityLevel,
    ) -> Self {
        Self {
            role: RoleSpec {
                agent_type: agent_type.into(),
                base_role: base_role.into(),
                duty: duty.into(),
            },
            refs,
            capacity,
        }
    }

    pub fn agent_type(&self) -> &str {
        &self.role.agent_type
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Defaults {
    pub capacity: Option<CapacityLevel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub agents: Vec<AgentEntry>,
}

/// Parsed orchestration specification. Defaults have already been applied
/// to every agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrchestrationSpec {
    pub defaults: Defaults,
    pub steps: Vec<Step>,
}

impl OrchestrationSpec {
    pub fn agents(&self) -> impl Iterator<Item = &AgentEntry> {
        self.steps.iter().flat_map(|s| s.agents.iter())
    }

    /// Agents with their 0-based step index.
    pub fn agents_with_step(&self) -> impl Iterator<Item = (usize, &AgentEntry)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.agents.iter().map(move |a| (i, a)))
    }

    pub fn agent_count(&self) -> usize {
        self.steps.iter().map(|s| s.agents.len()).sum()
    }

    pub fn ref_count(&self) -> usize {
        self.agents().map(|a| a.refs.len()).sum()
    }

    pub fn find(&self, agent_type: &str) -> Option<&AgentEntry> {
        self.agents().find(|a| a.agent_type() == agent_type)
    }

    pub fn find_mut(&mut self, agent_type: &str) -> Option<&mut AgentEntry> {
        self.steps
            .iter_mut()
            .flat_map(|s| s.agents.iter_mut())
            .find(|a| a.role.agent_type == agent_type)
    }
}

/// Hex SHA-256 of the canonical serialization.
pub fn spec_digest(spec: &OrchestrationSpec) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(serialize(spec).text.as_bytes()))
}

/// Value of a serialized field fragment (a span substring).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Scalar(String),
    List(Vec<String>),
}

/// Decode a span substring such as `medium`, `"quoted duty"` or `[a, b]`.
pub fn decode_fragment(text: &str) -> Option<FieldValue> {
    match yaml::load(text).ok()? {
        yaml::Node::Seq { items, .. } => items
            .iter()
            .map(|n| n.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .map(FieldValue::List),
        n => n.as_str().map(|s| FieldValue::Scalar(s.to_string())),
    }
}
