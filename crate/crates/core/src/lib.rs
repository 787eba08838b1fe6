//! Executable multi-agent orchestration.
//!
//! A YAML orchestration specification is parsed and validated
//! ([`spec_model`]), compiled into a layered DAG ([`graph`]) and executed over
//! pluggable worker backends with node-level memoization ([`exec_engine`]).
//! Execution records are scored by [`reward`]; [`counterfactual`] builds
//! single-field edits whose reward contrast is credited to the edited span,
//! and [`policy_sim`] trains a small factorized policy with group-relative
//! policy gradients plus that localized counterfactual objective.

pub mod par;
pub mod spec_model;
pub mod graph;
pub mod reward;
pub mod exec_engine;
pub mod counterfactual;
pub mod policy_sim;
