use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::parse::parse_spec_lenient;
use super::{OrchestrationSpec, RolePool};

/// Rule identifiers reported in [`Issue::rule`].
pub mod rules {
    pub const YAML_SYNTAX: &str = "yaml-syntax";
    pub const WRONG_TYPE: &str = "wrong-type";
    pub const MISSING_FIELD: &str = "missing-field";
    pub const UNKNOWN_CAPACITY: &str = "unknown-capacity";
    pub const EMPTY_SPEC: &str = "empty-spec";
    pub const EMPTY_STEP: &str = "empty-step";
    pub const EMPTY_FIELD: &str = "empty-field";
    pub const INVALID_IDENTIFIER: &str = "invalid-identifier";
    pub const DUPLICATE_TYPE: &str = "duplicate-type";
    pub const SELF_REF: &str = "self-ref";
    pub const DUPLICATE_REF: &str = "duplicate-ref";
    pub const FIRST_STEP_REF: &str = "first-step-ref";
    pub const FORWARD_REF: &str = "forward-ref";
    pub const UNKNOWN_BASE_ROLE: &str = "unknown-base-role";
    // warnings
    pub const UNKNOWN_DEFAULT: &str = "unknown-default";
    pub const UNKNOWN_KEY: &str = "unknown-key";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub rule: String,
    pub location: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl Issue {
    pub fn new(rule: &str, location: &str, message: impl Into<String>) -> Self {
        Self {
            rule: rule.to_string(),
            location: location.to_string(),
            message: message.into(),
            line: None,
            column: None,
        }
    }

    pub fn at(mut self, line: usize, column: usize) -> Self {
        self.line = Some(line);
        self.column = Some(column);
        self
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] ", self.rule)?;
        if !self.location.is_empty() {
            write!(f, "{}: ", self.location)?;
        }
        f.write_str(&self.message)?;
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, " (line {l}, column {c})")?;
        }
        Ok(())
    }
}

/// `valid` holds exactly when `errors` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub errors: Vec<Issue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn from_issues(errors: Vec<Issue>, warnings: Vec<Issue>) -> Self {
        Self {
            valid: errors.is_empty(),
            errors,
            warnings,
        }
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.errors.iter().any(|i| i.rule == rule)
    }

    pub fn rule_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.errors.iter().map(|i| i.rule.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Checks that need no role pool: structure, identifiers and references.
pub fn validate_structure(spec: &OrchestrationSpec) -> Vec<Issue> {
    let mut errors = Vec::new();
    if spec.steps.is_empty() {
        errors.push(Issue::new(
            rules::EMPTY_SPEC,
            "steps",
            "a specification needs at least one step",
        ));
    }

    // agent_type -> step indices declaring it
    let mut declared: HashMap<&str, Vec<usize>> = HashMap::new();
    for (si, agent) in spec.agents_with_step() {
        declared.entry(agent.agent_type()).or_default().push(si);
    }
    let mut reported_dup = HashSet::new();

    for (si, step) in spec.steps.iter().enumerate() {
        if step.agents.is_empty() {
            errors.push(Issue::new(
                rules::EMPTY_STEP,
                &format!("steps[{si}]"),
                "a step needs at least one agent",
            ));
        }
        for (ai, agent) in step.agents.iter().enumerate() {
            let loc = format!("steps[{si}].agents[{ai}]");
            let role = &agent.role;
            for (name, value) in [
                ("type", &role.agent_type),
                ("base_role", &role.base_role),
                ("duty", &role.duty),
            ] {
                if value.trim().is_empty() {
                    errors.push(Issue::new(
                        rules::EMPTY_FIELD,
                        &loc,
                        format!("`{name}` must be non-empty"),
                    ));
                } else if name != "duty" && !is_identifier(value) {
                    errors.push(Issue::new(
                        rules::INVALID_IDENTIFIER,
                        &loc,
                        format!("`{name}` value `{value}` is not an identifier"),
                    ));
                }
            }

            let me = agent.agent_type();
            if declared.get(me).map_or(0, Vec::len) > 1 && reported_dup.insert(me) {
                errors.push(Issue::new(
                    rules::DUPLICATE_TYPE,
                    &loc,
                    format!("agent type `{me}` is declared more than once"),
                ));
            }

            if si == 0 {
                if !agent.refs.is_empty() {
                    errors.push(Issue::new(
                        rules::FIRST_STEP_REF,
                        &format!("{loc}.ref"),
                        "references in the first step must be empty",
                    ));
                }
                continue;
            }

            let mut seen = HashSet::new();
            for target in &agent.refs {
                if target == me {
                    errors.push(Issue::new(
                        rules::SELF_REF,
                        &format!("{loc}.ref"),
                        format!("agent `{me}` references itself"),
                    ));
                    continue;
                }
                if !seen.insert(target.as_str()) {
                    errors.push(Issue::new(
                        rules::DUPLICATE_REF,
                        &format!("{loc}.ref"),
                        format!("reference `{target}` is listed more than once"),
                    ));
                    continue;
                }
                let earlier = declared
                    .get(target.as_str())
                    .is_some_and(|steps| steps.iter().any(|&s| s < si));
                if !earlier {
                    let msg = match declared.get(target.as_str()) {
                        None => format!("reference `{target}` names no declared agent"),
                        Some(_) => format!(
                            "reference `{target}` does not point to an agent of an earlier step"
                        ),
                    };
                    errors.push(Issue::new(rules::FORWARD_REF, &format!("{loc}.ref"), msg));
                }
            }
        }
    }
    errors
}

/// Full validation of a parsed specification against a role pool. Returns
/// every violation, not just the first.
pub fn validate(spec: &OrchestrationSpec, pool: &RolePool) -> ValidationReport {
    let mut errors = validate_structure(spec);
    for (si, step) in spec.steps.iter().enumerate() {
        for (ai, agent) in step.agents.iter().enumerate() {
            let base = &agent.role.base_role;
            if !base.trim().is_empty() && !pool.contains(base) {
                errors.push(Issue::new(
                    rules::UNKNOWN_BASE_ROLE,
                    &format!("steps[{si}].agents[{ai}].base_role"),
                    format!("base role `{base}` is not in role pool `{}`", pool.variant()),
                ));
            }
        }
    }
    ValidationReport::from_issues(errors, Vec::new())
}

/// Parse and validate raw text. Schema problems found while parsing
/// (missing fields, unknown capacities) are reported as rule violations.
pub fn validate_text(text: &str, pool: &RolePool) -> ValidationReport {
    match parse_spec_lenient(text) {
        Err(e) => ValidationReport::from_issues(e.issues(), Vec::new()),
        Ok(outcome) => match outcome.spec {
            None => ValidationReport::from_issues(outcome.errors, outcome.warnings),
            Some(spec) => {
                let mut report = validate(&spec, pool);
                report.warnings = outcome.warnings;
                report
            }
        },
    }
}
