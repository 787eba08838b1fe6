//! Toy orchestration policy trained against a synthetic task environment.
//!
//! Every grammar decision of the factorized policy stands in for one
//! generated token, so the token-level objectives (likelihood warm start,
//! clipped group-relative policy gradient, span-restricted counterfactual
//! preference) keep their form at decision granularity.

mod env;
mod objectives;
mod policy;
pub mod rng;
mod train;

pub use env::{
    agent_name, Archetype, DutyTemplates, EnvParams, Requirement, SyntheticBackend, SyntheticEnv, OFF_POOL_ROLES,
};
pub use objectives::{
    cf_gradient, cf_objective, cf_step, grpo_gradient, grpo_objective, grpo_step, warm_start, CfPairInput, CfWeights,
    GrpoConfig, Optimizer, OptimizerKind, Rollout, WarmStart,
};
pub use policy::{
    add_logp_grad, decision_logp, sigmoid, softmax, span_mean, Decision, DecisionKind, DecisionTrace, Grammar,
    PolicyError, PolicyParams, SparseGrad,
};
pub use train::{train, IterationStats, PolicyConfig, TrainConfig, TrainError, TrainReport, TrainRun, WarmStartConfig};
