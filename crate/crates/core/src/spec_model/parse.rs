use super::validate::{rules, Issue};
use super::yaml::{self, Node, Pos};
use super::{AgentEntry, CapacityLevel, Defaults, OrchestrationSpec, RoleSpec, Step};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("malformed YAML: {message} (line {line}, column {column})")]
    Yaml {
        message: String,
        line: usize,
        column: usize,
    },
    #[error("{}", .issues.first().map(|i| i.to_string()).unwrap_or_default())]
    Schema { issues: Vec<Issue> },
}

impl ParseError {
    /// Source position of the (first) problem, 1-based.
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            ParseError::Yaml { line, column, .. } => Some((*line, *column)),
            ParseError::Schema { issues } => issues
                .first()
                .and_then(|i| Some((i.line?, i.column?))),
        }
    }

    pub fn issues(&self) -> Vec<Issue> {
        match self {
            ParseError::Yaml {
                message,
                line,
                column,
            } => vec![Issue::new(rules::YAML_SYNTAX, "", message.clone()).at(*line, *column)],
            ParseError::Schema { issues } => issues.clone(),
        }
    }
}

/// Result of a lenient parse: every schema-level problem is collected instead
/// of stopping at the first one.
#[derive(Debug, Clone)]
pub struct ParseOutcome {
    /// Present only when no schema errors were found.
    pub spec: Option<OrchestrationSpec>,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

/// Parse and default a specification, failing on the first class of schema
/// problems (missing fields, unknown capacity tokens, wrong shapes).
pub fn parse_spec(text: &str) -> Result<OrchestrationSpec, ParseError> {
    let outcome = parse_spec_lenient(text)?;
    match outcome.spec {
        Some(spec) => Ok(spec),
        None => Err(ParseError::Schema {
            issues: outcome.errors,
        }),
    }
}

pub fn parse_spec_lenient(text: &str) -> Result<ParseOutcome, ParseError> {
    let root = yaml::load(text).map_err(|e| ParseError::Yaml {
        message: e.message,
        line: e.line,
        column: e.col,
    })?;
    let mut cx = Cx::default();
    let spec = cx.spec(&root);
    Ok(ParseOutcome {
        spec: if cx.errors.is_empty() { spec } else { None },
        errors: cx.errors,
        warnings: cx.warnings,
    })
}

#[derive(Default)]
struct Cx {
    errors: Vec<Issue>,
    warnings: Vec<Issue>,
}

impl Cx {
    fn error(&mut self, rule: &str, location: &str, message: String, pos: Pos) {
        self.errors
            .push(Issue::new(rule, location, message).at(pos.line, pos.col));
    }

    fn warn(&mut self, rule: &str, location: &str, message: String, pos: Pos) {
        self.warnings
            .push(Issue::new(rule, location, message).at(pos.line, pos.col));
    }

    fn spec(&mut self, root: &Node) -> Option<OrchestrationSpec> {
        let Node::Map { entries, .. } = root else {
            self.error(
                rules::WRONG_TYPE,
                "",
                format!("top level must be a mapping, found {}", root.kind()),
                root.pos(),
            );
            return None;
        };
        let mut defaults = Defaults::default();
        let mut steps_node = None;
        for (key, value) in entries {
            match key.as_str() {
                Some("defaults") => defaults = self.defaults(value),
                Some("steps") => steps_node = Some(value),
                other => self.warn(
                    rules::UNKNOWN_KEY,
                    "",
                    format!("unknown top-level key `{}`", other.unwrap_or("?")),
                    key.pos(),
                ),
            }
        }
        let Some(steps_node) = steps_node else {
            self.error(
                rules::MISSING_FIELD,
                "steps",
                "missing required field `steps`".into(),
                root.pos(),
            );
            return None;
        };
        let step_items = match steps_node {
            Node::Seq { items, .. } => items.as_slice(),
            n if n.is_null() => &[],
            n => {
                self.error(
                    rules::WRONG_TYPE,
                    "steps",
                    format!("`steps` must be a sequence, found {}", n.kind()),
                    n.pos(),
                );
                return None;
            }
        };
        let mut steps = Vec::with_capacity(step_items.len());
        let mut ok = true;
        for (si, step) in step_items.iter().enumerate() {
            match self.step(si, step, &defaults) {
                Some(s) => steps.push(s),
                None => ok = false,
            }
        }
        ok.then_some(OrchestrationSpec { defaults, steps })
    }

    fn defaults(&mut self, node: &Node) -> Defaults {
        let mut defaults = Defaults::default();
        let Node::Map { entries, .. } = node else {
            if !node.is_null() {
                self.error(
                    rules::WRONG_TYPE,
                    "defaults",
                    format!("`defaults` must be a mapping, found {}", node.kind()),
                    node.pos(),
                );
            }
            return defaults;
        };
        for (key, value) in entries {
            match key.as_str() {
                Some("capacity") => {
                    defaults.capacity = self.capacity("defaults.capacity", value);
                }
                other => self.warn(
                    rules::UNKNOWN_DEFAULT,
                    "defaults",
                    format!("unsupported default `{}` ignored", other.unwrap_or("?")),
                    key.pos(),
                ),
            }
        }
        defaults
    }

    fn capacity(&mut self, loc: &str, node: &Node) -> Option<CapacityLevel> {
        match node.as_str() {
            Some(token) => match token.parse() {
                Ok(level) => Some(level),
                Err(e) => {
                    self.error(rules::UNKNOWN_CAPACITY, loc, format!("{e}"), node.pos());
                    None
                }
            },
            None => {
                self.error(
                    rules::WRONG_TYPE,
                    loc,
                    format!("capacity must be a scalar, found {}", node.kind()),
                    node.pos(),
                );
                None
            }
        }
    }

    fn step(&mut self, si: usize, node: &Node, defaults: &Defaults) -> Option<Step> {
        let loc = format!("steps[{si}]");
        let Node::Map { entries, .. } = node else {
            self.error(
                rules::WRONG_TYPE,
                &loc,
                format!("step must be a mapping with `agents`, found {}", node.kind()),
                node.pos(),
            );
            return None;
        };
        let mut agents_node = None;
        for (key, value) in entries {
            match key.as_str() {
                Some("agents") => agents_node = Some(value),
                other => self.warn(
                    rules::UNKNOWN_KEY,
                    &loc,
                    format!("unknown step key `{}`", other.unwrap_or("?")),
                    key.pos(),
                ),
            }
        }
        let Some(agents_node) = agents_node else {
            self.error(
                rules::MISSING_FIELD,
                &loc,
                "missing required field `agents`".into(),
                node.pos(),
            );
            return None;
        };
        let items = match agents_node {
            Node::Seq { items, .. } => items.as_slice(),
            n if n.is_null() => &[],
            n => {
                self.error(
                    rules::WRONG_TYPE,
                    &format!("{loc}.agents"),
                    format!("`agents` must be a sequence, found {}", n.kind()),
                    n.pos(),
                );
                return None;
            }
        };
        let mut agents = Vec::with_capacity(items.len());
        let mut ok = true;
        for (ai, agent) in items.iter().enumerate() {
            match self.agent(&format!("{loc}.agents[{ai}]"), agent, defaults) {
                Some(a) => agents.push(a),
                None => ok = false,
            }
        }
        ok.then_some(Step { agents })
    }

    fn agent(&mut self, loc: &str, node: &Node, defaults: &Defaults) -> Option<AgentEntry> {
        let Node::Map { entries, pos } = node else {
            self.error(
                rules::WRONG_TYPE,
                loc,
                format!("agent entry must be a mapping, found {}", node.kind()),
                node.pos(),
            );
            return None;
        };
        let mut fields: [Option<&Node>; 5] = [None; 5];
        const NAMES: [&str; 5] = ["type", "base_role", "duty", "ref", "capacity"];
        for (key, value) in entries {
            match key.as_str().and_then(|k| NAMES.iter().position(|n| *n == k)) {
                Some(i) => fields[i] = Some(value),
                None => self.warn(
                    rules::UNKNOWN_KEY,
                    loc,
                    format!("unknown agent key `{}`", key.as_str().unwrap_or("?")),
                    key.pos(),
                ),
            }
        }
        let before = self.errors.len();
        let text_field = |cx: &mut Cx, idx: usize| -> Option<String> {
            let name = NAMES[idx];
            match fields[idx] {
                None => {
                    cx.error(
                        rules::MISSING_FIELD,
                        loc,
                        format!("missing required field `{name}`"),
                        *pos,
                    );
                    None
                }
                Some(n) if n.is_null() => {
                    cx.error(
                        rules::MISSING_FIELD,
                        loc,
                        format!("required field `{name}` is empty"),
                        n.pos(),
                    );
                    None
                }
                Some(n) => match n.as_str() {
                    Some(s) => Some(s.to_string()),
                    None => {
                        cx.error(
                            rules::WRONG_TYPE,
                            &format!("{loc}.{name}"),
                            format!("`{name}` must be a scalar, found {}", n.kind()),
                            n.pos(),
                        );
                        None
                    }
                },
            }
        };
        let agent_type = text_field(self, 0);
        let base_role = text_field(self, 1);
        let duty = text_field(self, 2);

        let refs = match fields[3] {
            None => {
                self.error(
                    rules::MISSING_FIELD,
                    loc,
                    "missing required field `ref`".into(),
                    *pos,
                );
                None
            }
            Some(Node::Seq { items, .. }) => {
                let mut refs = Vec::with_capacity(items.len());
                for item in items {
                    match item.as_str() {
                        Some(s) => refs.push(s.to_string()),
                        None => self.error(
                            rules::WRONG_TYPE,
                            &format!("{loc}.ref"),
                            format!("reference must be a scalar, found {}", item.kind()),
                            item.pos(),
                        ),
                    }
                }
                Some(refs)
            }
            Some(n) if n.is_null() => {
                self.error(
                    rules::MISSING_FIELD,
                    loc,
                    "required field `ref` is empty (use `[]`)".into(),
                    n.pos(),
                );
                None
            }
            Some(n) => {
                self.error(
                    rules::WRONG_TYPE,
                    &format!("{loc}.ref"),
                    format!("`ref` must be a sequence, found {}", n.kind()),
                    n.pos(),
                );
                None
            }
        };

        let capacity = match fields[4] {
            Some(n) if !n.is_null() => self.capacity(&format!("{loc}.capacity"), n),
            _ => match defaults.capacity {
                Some(c) => Some(c),
                None => {
                    self.error(
                        rules::MISSING_FIELD,
                        loc,
                        "missing required field `capacity` and no default capacity".into(),
                        *pos,
                    );
                    None
                }
            },
        };

        if self.errors.len() != before {
            return None;
        }
        Some(AgentEntry {
            role: RoleSpec {
                agent_type: agent_type?,
                base_role: base_role?,
                duty: duty?,
            },
            refs: refs?,
            capacity: capacity?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_model::fixtures::MATH_WORD_PROBLEM;

    #[test]
    fn parses_reference_example() {
        let spec = parse_spec(MATH_WORD_PROBLEM).unwrap();
        assert_eq!(spec.agent_count(), 5);
        let sizes: Vec<_> = spec.steps.iter().map(|s| s.agents.len()).collect();
        assert_eq!(sizes, vec![1, 2, 1, 1]);
        assert_eq!(spec.defaults.capacity, Some(CapacityLevel::Medium));
        let compute = spec.find("compute_answer").unwrap();
        assert_eq!(compute.refs, vec!["build_equations", "check_units"]);
        assert_eq!(compute.capacity, CapacityLevel::Medium);
        assert_eq!(spec.ref_count(), 6);
    }

    #[test]
    fn unknown_capacity_token() {
        let text = MATH_WORD_PROBLEM.replacen("capacity: small", "capacity: huge", 1);
        let err = parse_spec(&text).unwrap_err();
        let issues = err.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].rule, rules::UNKNOWN_CAPACITY);
        assert!(issues[0].message.contains("unknown capacity token"));
        assert_eq!(err.position(), Some((9, 19)));
    }

    #[test]
    fn missing_capacity_takes_default() {
        let text = MATH_WORD_PROBLEM.replacen("        capacity: small\n", "", 1);
        let spec = parse_spec(&text).unwrap();
        assert_eq!(
            spec.find("extract_quantities").unwrap().capacity,
            CapacityLevel::Medium
        );
    }

    #[test]
    fn missing_field_without_default() {
        let text = "steps:\n  - agents:\n      - type: a\n        base_role: calculator\n        duty: d\n        ref: []\n";
        let err = parse_spec(text).unwrap_err();
        assert_eq!(err.issues()[0].rule, rules::MISSING_FIELD);
        assert!(err.to_string().contains("capacity"));
    }

    #[test]
    fn malformed_yaml_carries_position() {
        let err = parse_spec("steps: [\n  - agents: {\n").unwrap_err();
        assert!(matches!(err, ParseError::Yaml { .. }));
        assert!(err.position().is_some());
    }

    #[test]
    fn unknown_default_key_is_a_warning() {
        let text = MATH_WORD_PROBLEM.replacen("defaults:\n", "defaults:\n  temperature: 0.3\n", 1);
        let out = parse_spec_lenient(&text).unwrap();
        assert!(out.spec.is_some());
        assert!(out.errors.is_empty());
        assert_eq!(out.warnings[0].rule, rules::UNKNOWN_DEFAULT);
    }

    #[test]
    fn all_missing_fields_are_collected() {
        let text = "steps:\n  - agents:\n      - type: a\n  - agents:\n      - duty: x\n        ref: []\n";
        let out = parse_spec_lenient(text).unwrap();
        assert!(out.spec.is_none());
        assert_eq!(
            out.errors.iter().filter(|i| i.rule == rules::MISSING_FIELD).count(),
            7
        );
    }
}
