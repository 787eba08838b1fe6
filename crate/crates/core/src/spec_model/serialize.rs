//! Canonical serialization with a span index.
//!
//! Layout: two-space indentation, key order `type, base_role, duty, ref,
//! capacity`, a blank line between steps, flow-style `ref` lists and
//! single-line duties (plain when unambiguous, double-quoted otherwise).
//! Every indexed value is one contiguous byte range.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::OrchestrationSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanField {
    Duty,
    Refs,
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpan {
    pub agent: String,
    pub field: SpanField,
    pub start: usize,
    pub end: usize,
}

impl FieldSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSpec {
    pub text: String,
    spans: BTreeMap<(String, SpanField), Range<usize>>,
}

impl SerializedSpec {
    pub fn span(&self, agent: &str, field: SpanField) -> Option<FieldSpan> {
        self.spans
            .get(&(agent.to_string(), field))
            .map(|r| FieldSpan {
                agent: agent.to_string(),
                field,
                start: r.start,
                end: r.end,
            })
    }

    pub fn slice(&self, span: &FieldSpan) -> &str {
        &self.text[span.range()]
    }

    /// All spans ordered by start offset.
    pub fn spans(&self) -> Vec<FieldSpan> {
        let mut all: Vec<FieldSpan> = self
            .spans
            .iter()
            .map(|((agent, field), r)| FieldSpan {
                agent: agent.clone(),
                field: *field,
                start: r.start,
                end: r.end,
            })
            .collect();
        all.sort_by_key(|s| s.start);
        all
    }
}

fn looks_non_string(s: &str) -> bool {
    let lower = s.to_ascii_lowercase();
    matches!(
        lower.as_str(),
        "~" | "null" | "true" | "false" | "yes" | "no" | "on" | "off" | "y" | "n"
    ) || s.parse::<f64>().is_ok()
        || lower.starts_with("0x")
        || lower.starts_with("0o")
        || lower.starts_with(".inf")
        || lower.starts_with("-.inf")
        || lower.starts_with(".nan")
}

/// Whether `s` survives as a single-line plain scalar in block context.
pub(crate) fn plain_safe(s: &str) -> bool {
    let Some(first) = s.chars().next() else {
        return false;
    };
    if s.trim() != s || s.chars().any(char::is_control) {
        return false;
    }
    if "-?:,[]{}#&*!|>'\"%@`".contains(first) || s.starts_with("...") {
        return false;
    }
    if s.contains(": ") || s.contains(" #") || s.ends_with(':') {
        return false;
    }
    !looks_non_string(s)
}

fn scalar(s: &str) -> String {
    if plain_safe(s) {
        s.to_string()
    } else {
        // JSON string escapes are a subset of YAML double-quoted escapes.
        serde_json::to_string(s).expect("string serializes")
    }
}

pub fn serialize(spec: &OrchestrationSpec) -> SerializedSpec {
    let mut text = String::new();
    let mut spans = BTreeMap::new();
    if let Some(cap) = spec.defaults.capacity {
        let _ = write!(text, "defaults:\n  capacity: {cap}\n");
    }
    text.push_str("steps:\n");
    for (si, step) in spec.steps.iter().enumerate() {
        if si > 0 {
            text.push('\n');
        }
        text.push_str("  - agents:\n");
        for agent in &step.agents {
            let name = agent.agent_type().to_string();
            let _ = writeln!(text, "      - type: {}", scalar(&agent.role.agent_type));
            let _ = writeln!(text, "        base_role: {}", scalar(&agent.role.base_role));

            text.push_str("        duty: ");
            let start = text.len();
            text.push_str(&scalar(&agent.role.duty));
            spans.insert((name.clone(), SpanField::Duty), start..text.len());
            text.push('\n');

            text.push_str("        ref: ");
            let start = text.len();
            text.push('[');
            for (i, r) in agent.refs.iter().enumerate() {
                if i > 0 {
                    text.push_str(", ");
                }
                text.push_str(&scalar(r));
            }
            text.push(']');
            spans.insert((name.clone(), SpanField::Refs), start..text.len());
            text.push('\n');

            text.push_str("        capacity: ");
            let start = text.len();
            text.push_str(agent.capacity.as_str());
            spans.insert((name, SpanField::Capacity), start..text.len());
            text.push('\n');
        }
    }
    SerializedSpec { text, spans }
}
