//! Deterministic test-double backend driven by a rule table.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{WorkerBackend, WorkerCall, WorkerError, WorkerResult};
use crate::spec_model::CapacityLevel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScriptAction {
    /// `text` followed by the worker input.
    Prefix { text: String },
    /// A constant output.
    Constant { text: String },
    Fail { message: String },
}

/// Rule for one `(base_role, capacity)` pair; a missing capacity matches
/// every level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub base_role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<CapacityLevel>,
    #[serde(flatten)]
    pub action: ScriptAction,
    #[serde(default)]
    pub tokens_in: u64,
    #[serde(default)]
    pub tokens_out: u64,
}

impl ScriptRule {
    pub fn prefix(
        base_role: &str,
        capacity: Option<CapacityLevel>,
        text: &str,
        tokens_in: u64,
        tokens_out: u64,
    ) -> Self {
        Self {
            base_role: base_role.into(),
            capacity,
            action: ScriptAction::Prefix { text: text.into() },
            tokens_in,
            tokens_out,
        }
    }

    pub fn constant(
        base_role: &str,
        capacity: Option<CapacityLevel>,
        text: &str,
        tokens_in: u64,
        tokens_out: u64,
    ) -> Self {
        Self {
            action: ScriptAction::Constant { text: text.into() },
            ..Self::prefix(base_role, capacity, "", tokens_in, tokens_out)
        }
    }

    pub fn fail(base_role: &str, capacity: Option<CapacityLevel>, message: &str) -> Self {
        Self {
            action: ScriptAction::Fail {
                message: message.into(),
            },
            ..Self::prefix(base_role, capacity, "", 0, 0)
        }
    }

    fn matches(&self, call: &WorkerCall<'_>) -> bool {
        self.base_role == call.role.base_role && self.capacity.is_none_or(|c| c == call.capacity)
    }
}

/// What to do for calls no rule matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Output a short digest of role, duty, capacity and input. Any change
    /// to a node's inputs changes its output, which makes cache bugs visible.
    #[default]
    Digest,
    /// Output the input unchanged.
    Echo,
    Fail,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTable {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub fallback: Fallback,
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    table: ScriptTable,
}

/// Token charge of the fallback modes, by capacity.
fn fallback_tokens(c: CapacityLevel) -> (u64, u64) {
    match c {
        CapacityLevel::Small => (10, 5),
        CapacityLevel::Medium => (20, 10),
        CapacityLevel::Large => (40, 20),
    }
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        Self { table }
    }

    /// Backend whose every call takes the digest fallback.
    pub fn digesting() -> Self {
        Self::new(ScriptTable::default())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text).map(Self::new)
    }

    pub fn table(&self) -> &ScriptTable {
        &self.table
    }
}

impl WorkerBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn call(&self, call: &WorkerCall<'_>, _seed: u64) -> Result<WorkerResult, WorkerError> {
        let input = call.input_text();
        if let Some(rule) = self.table.rules.iter().find(|r| r.matches(call)) {
            let output = match &rule.action {
                ScriptAction::Prefix { text } => format!("{text}{input}"),
                ScriptAction::Constant { text } => text.clone(),
                ScriptAction::Fail { message } => return Err(WorkerError::Worker(message.clone())),
            };
            return Ok(WorkerResult::new(output, rule.tokens_in, rule.tokens_out));
        }
        let (tin, tout) = fallback_tokens(call.capacity);
        match self.table.fallback {
            Fallback::Echo => Ok(WorkerResult::new(input, tin, tout)),
            Fallback::Fail => Err(WorkerError::Worker(format!(
                "no script rule for {} ({})",
                call.role.base_role, call.capacity
            ))),
            Fallback::Digest => {
                let mut h = Sha256::new();
                for part in [
                    call.role.base_role.as_str(),
                    call.role.duty.as_str(),
                    call.capacity.as_str(),
                    input.as_str(),
                ] {
                    h.update((part.len() as u64).to_le_bytes());
                    h.update(part.as_bytes());
                }
                let digest = hex::encode(&h.finalize()[..8]);
                Ok(WorkerResult::new(
                    format!("{}:{}", call.role.base_role, digest),
                    tin,
                    tout,
                ))
            }
        }
    }
}
