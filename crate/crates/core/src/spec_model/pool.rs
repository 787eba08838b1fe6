use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Base roles an agent may inherit from, each with its canonical duty text.
/// Rolling a customized duty back restores this text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePool {
    variant: String,
    roles: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("role pool must not be empty")]
    Empty,
    #[error("canonical duty of `{0}` must not be empty")]
    EmptyDuty(String),
}

const BASELINE: &[(&str, &str)] = &[
    ("calculator", "Carry out the required arithmetic and report the numeric result."),
    ("critic", "Point out flaws or gaps in the upstream reasoning."),
    ("equation_builder", "Turn the problem statement into equations or relations."),
    ("planner", "Break the task into ordered subgoals for downstream agents."),
    ("quantity_extractor", "List the quantities and unknowns stated in the task."),
    ("unit_checker", "Check that every quantity carries a consistent unit."),
    ("verifier", "Check the upstream answer and return the final answer."),
];

impl RolePool {
    pub fn new(
        variant: impl Into<String>,
        roles: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, PoolError> {
        let roles: BTreeMap<String, String> = roles.into_iter().collect();
        if roles.is_empty() {
            return Err(PoolError::Empty);
        }
        if let Some((name, _)) = roles.iter().find(|(_, d)| d.trim().is_empty()) {
            return Err(PoolError::EmptyDuty(name.clone()));
        }
        Ok(Self {
            variant: variant.into(),
            roles,
        })
    }

    /// The `baseline` role pool variant.
    pub fn baseline() -> Self {
        Self::new(
            "baseline",
            BASELINE
                .iter()
                .map(|(r, d)| (r.to_string(), d.to_string())),
        )
        .expect("baseline pool is well formed")
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn contains(&self, base_role: &str) -> bool {
        self.roles.contains_key(base_role)
    }

    pub fn canonical_duty(&self, base_role: &str) -> Option<&str> {
        self.roles.get(base_role).map(String::as_str)
    }

    /// Role names in sorted order.
    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.roles.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

impl Default for RolePool {
    fn default() -> Self {
        Self::baseline()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_covers_example_roles() {
        let pool = RolePool::baseline();
        for role in ["quantity_extractor", "equation_builder", "unit_checker", "calculator", "verifier"] {
            assert!(pool.contains(role), "{role}");
        }
        assert_eq!(pool.variant(), "baseline");
    }

    #[test]
    fn rejects_empty_pool_and_duty() {
        assert_eq!(RolePool::new("x", Vec::new()), Err(PoolError::Empty));
        assert!(matches!(
            RolePool::new("x", vec![("a".into(), " ".into())]),
            Err(PoolError::EmptyDuty(_))
        ));
    }
}
