//! Likelihood warm start, clipped group-relative policy gradient and the
//! span-restricted counterfactual preference objective.

use serde::{Deserialize, Serialize};

use super::policy::{
    add_logp_grad, add_span_grad, decision_logp, sigmoid, softplus, span_mean, Decision, DecisionTrace, PolicyError,
    PolicyParams, SparseGrad,
};
use crate::counterfactual::Contrast;
use crate::spec_model::{OrchestrationSpec, SpanField, TaskInstance};

/// Mean corpus log-likelihood of pre-scored traces under `theta`.
fn corpus_loglik(theta: &[f64], traces: &[Vec<Decision>]) -> f64 {
    let total: f64 = traces
        .iter()
        .flat_map(|t| t.iter())
        .map(|d| decision_logp(theta, d.offset, d.width, d.choice))
        .sum();
    total / traces.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub params: PolicyParams,
    /// Mean corpus log-likelihood before each epoch and after the last.
    pub history: Vec<f64>,
}

/// Full-batch gradient ascent on the mean log-likelihood of `corpus`.
pub fn warm_start(
    params: &PolicyParams,
    corpus: &[(TaskInstance, OrchestrationSpec)],
    epochs: usize,
    lr: f64,
) -> Result<WarmStart, PolicyError> {
    if corpus.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    let traces: Vec<Vec<Decision>> = corpus
        .iter()
        .map(|(task, spec)| params.score_spec(spec, task).map(|(_, t)| t.decisions))
        .collect::<Result<_, _>>()?;
    let mut p = params.clone();
    let n = traces.len() as f64;
    let mut history = vec![corpus_loglik(&p.theta, &traces)];
    for _ in 0..epochs {
        let mut grad = SparseGrad::new();
        for d in traces.iter().flatten() {
            add_logp_grad(&p.theta, d, 1.0 / n, &mut grad);
        }
        p.apply(&grad, lr);
        history.push(corpus_loglik(&p.theta, &traces));
    }
    Ok(WarmStart { params: p, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub lr: f64,
    pub clip: f64,
    /// Weight of the per-decision KL penalty towards the reference policy.
    pub kl_coef: f64,
    /// Optimization passes per batch against the same snapshot.
    pub epochs: usize,
    /// Optimizer used by the training loop; [`grpo_step`] itself is plain
    /// gradient ascent.
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state for ascending a sparse gradient over the whole
/// parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    pub fn ascend(&mut self, params: &mut PolicyParams, grad: &SparseGrad, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match self {
            Self::Sgd => params.apply(grad, lr),
            Self::Adam { m, v, t } => {
                *t += 1;
                let (c1, c2) = (1.0 - B1.powi(*t), 1.0 - B2.powi(*t));
                for i in 0..params.theta.len() {
                    let g = grad.get(&i).copied().unwrap_or(0.0);
                    m[i] = B1 * m[i] + (1.0 - B1) * g;
                    v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                    if m[i] != 0.0 {
                        params.theta[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            clip: 0.2,
            kl_coef: 0.0,
            epochs: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// A sampled trace (log-probs from the sampling snapshot) and its
/// group-relative advantage.
#[derive(Debug, Clone, Copy)]
pub struct Rollout<'a> {
    pub trace: &'a DecisionTrace,
    pub advantage: f64,
}

fn clipped_ratio(r: f64, clip: f64) -> f64 {
    r.clamp(1.0 - clip, 1.0 + clip)
}

/// Mean over rollouts of the per-decision mean of the clipped surrogate,
/// minus the KL penalty when a reference is given.
pub fn grpo_objective(theta: &[f64], rollouts: &[Rollout<'_>], reference: Option<&[f64]>, cfg: &GrpoConfig) -> f64 {
    let mut total = 0.0;
    for ro in rollouts {
        let n = ro.trace.len().max(1) as f64;
        let mut sum = 0.0;
        for d in &ro.trace.decisions {
            let lp = decision_logp(theta, d.offset, d.width, d.choice);
            let r = (lp - d.logp).exp();
            let a = ro.advantage;
            sum += (r * a).min(clipped_ratio(r, cfg.clip) * a);
            if let (Some(re), true) = (reference, cfg.kl_coef != 0.0) {
                let x = decision_logp(re, d.offset, d.width, d.choice) - lp;
                sum -= cfg.kl_coef * (x.exp() - x - 1.0);
            }
        }
        total += sum / n;
    }
    total / rollouts.len().max(1) as f64
}

pub fn grpo_gradient(theta: &[f64], rollouts: &[Rollout<'_>], reference: Option<&[f64]>, cfg: &GrpoConfig) -> SparseGrad {
    let mut grad = SparseGrad::new();
    let m = rollouts.len().max(1) as f64;
    for ro in rollouts {
        let n = ro.trace.len().max(1) as f64;
        for d in &ro.trace.decisions {
            let lp = decision_logp(theta, d.offset, d.width, d.choice);
            let r = (lp - d.logp).exp();
            let a = ro.advantage;
            let unclipped = if a >= 0.0 { r <= 1.0 + cfg.clip } else { r >= 1.0 - cfg.clip };
            let mut coef = if unclipped { a * r } else { 0.0 };
            if let (Some(re), true) = (reference, cfg.kl_coef != 0.0) {
                let x = decision_logp(re, d.offset, d.width, d.choice) - lp;
                coef -= cfg.kl_coef * (1.0 - x.exp());
            }
            if coef != 0.0 {
                add_logp_grad(theta, d, coef / (n * m), &mut grad);
            }
        }
    }
    grad
}

/// Ascend the surrogate for `cfg.epochs` passes.
pub fn grpo_step(
    params: &PolicyParams,
    rollouts: &[Rollout<'_>],
    reference: Option<&[f64]>,
    cfg: &GrpoConfig,
) -> Result<PolicyParams, PolicyError> {
    if rollouts.len() < 2 {
        return Err(PolicyError::GroupTooSmall(rollouts.len()));
    }
    let mut p = params.clone();
    for _ in 0..cfg.epochs {
        let grad = grpo_gradient(&p.theta, rollouts, reference, cfg);
        p.apply(&grad, cfg.lr);
    }
    Ok(p)
}

/// One scored counterfactual pair, ready for the preference objective.
#[derive(Debug, Clone)]
pub struct CfPairInput<'a> {
    pub task: &'a TaskInstance,
    pub original: &'a DecisionTrace,
    pub edited: &'a DecisionTrace,
    pub agent: &'a str,
    pub field: SpanField,
    pub contrast: Contrast,
}

impl<'a> CfPairInput<'a> {
    /// Score both specs under `params` and bundle them with `contrast`.
    pub fn score(
        params: &PolicyParams,
        task: &'a TaskInstance,
        original: &OrchestrationSpec,
        edited: &OrchestrationSpec,
        traces: &'a mut (DecisionTrace, DecisionTrace),
        agent: &'a str,
        field: SpanField,
        contrast: Contrast,
    ) -> Result<Self, PolicyError> {
        traces.0 = params.score_spec(original, task)?.1;
        traces.1 = params.score_spec(edited, task)?.1;
        Ok(Self {
            task,
            original: &traces.0,
            edited: &traces.1,
            agent,
            field,
            contrast,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfWeights {
    /// Weight of the counterfactual objective.
    pub lambda: f64,
    pub beta: f64,
}

/// `lambda * w * log sigmoid(beta * b * (s_orig - s_cf))`.
pub fn cf_objective(theta: &[f64], pair: &CfPairInput<'_>, weights: CfWeights) -> Result<f64, PolicyError> {
    let s_o = span_mean(theta, pair.original, pair.agent, pair.field)?;
    let s_c = span_mean(theta, pair.edited, pair.agent, pair.field)?;
    let x = weights.beta * f64::from(pair.contrast.direction) * (s_o - s_c);
    Ok(weights.lambda * pair.contrast.weight * -softplus(-x))
}

/// Gradient of [`cf_objective`]; only the two spans' decision rows appear.
pub fn cf_gradient(theta: &[f64], pair: &CfPairInput<'_>, weights: CfWeights) -> Result<SparseGrad, PolicyError> {
    let s_o = span_mean(theta, pair.original, pair.agent, pair.field)?;
    let s_c = span_mean(theta, pair.edited, pair.agent, pair.field)?;
    let b = f64::from(pair.contrast.direction);
    let x = weights.beta * b * (s_o - s_c);
    let coef = weights.lambda * pair.contrast.weight * (1.0 - sigmoid(x)) * weights.beta * b;
    let mut grad = SparseGrad::new();
    if coef != 0.0 {
        add_span_grad(theta, pair.original, pair.agent, pair.field, coef, &mut grad);
        add_span_grad(theta, pair.edited, pair.agent, pair.field, -coef, &mut grad);
    }
    Ok(grad)
}

/// Ascend the counterfactual objective of one unfiltered pair.
pub fn cf_step(params: &PolicyParams, pair: &CfPairInput<'_>, weights: CfWeights, lr: f64) -> Result<PolicyParams, PolicyError> {
    if pair.contrast.filtered {
        return Err(PolicyError::FilteredPair);
    }
    let grad = cf_gradient(&params.theta, pair, weights)?;
    let mut p = params.clone();
    p.apply(&grad, lr);
    Ok(p)
}
