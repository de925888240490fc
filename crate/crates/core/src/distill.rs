//! Compressing viewpoint-guided behaviour into a viewpoint-free student.
//!
//! Three routes:
//! - KL policy distillation: the new student matches the guided action
//!   distribution at every visited state, `mean D_KL(p_guided ‖ q_student)`.
//!   Targets are exact distributions, so there is no sampling noise in the
//!   objective.
//! - DPO on (with viewpoint, without or with a sign-flipped viewpoint) trace
//!   pairs.
//! - Export of the knowledge base as an instruction-tuning data set.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::TaskSpec;
use crate::rng::RngStream;
use crate::student::{distribution_for, trace_grad_log_prob, trace_log_prob, StudentPolicy, Weights, FEATURE_DIM, FEATURE_VERSION};
use crate::trace::{candidate_actions, rollout, TokenSeq, Trace};
use crate::viewpoint::{ActiveViewpoints, ErrorClass, KnowledgeBase, ViewpointId};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("candidate feature version {found} does not match {FEATURE_VERSION}")]
    FeatureVersionMismatch { found: u32 },
    #[error("loss diverged at step {step} (loss {loss}); lower the learning rate")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("no preference pairs")]
    EmptyPairs,
    #[error("invalid distillation settings: {0}")]
    Invalid(String),
}

/// Loss growth beyond this multiple of the starting loss counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub state: TokenSeq,
    pub target_distribution: Vec<f64>,
    pub task_id: usize,
    pub viewpoint_ids: Vec<ViewpointId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillDataset {
    pub records: Vec<DistillRecord>,
}

impl DistillDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Rolls out the guided policy and stores its full action distribution at
/// every visited state.
pub fn build_distill_dataset(
    policy: &StudentPolicy,
    active: &ActiveViewpoints,
    tasks: &[TaskSpec],
    rollouts_per_task: usize,
    rng: &mut RngStream,
) -> DistillDataset {
    let base = rng.seed();
    let ids = active.ids();
    let mut records = Vec::new();
    for (task_id, task) in tasks.iter().enumerate() {
        for r in 0..rollouts_per_task {
            let mut stream = RngStream::derived(base, &[task_id as u64, r as u64]);
            let trace = rollout(task, policy, active, &mut stream);
            for step in &trace.steps {
                let dist = distribution_for(policy, &step.state_before, &step.candidates, active);
                records.push(DistillRecord {
                    state: step.state_before.clone(),
                    target_distribution: dist.probs,
                    task_id,
                    viewpoint_ids: ids.clone(),
                });
            }
        }
    }
    DistillDataset { records }
}

fn kl(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.ln() - lq))
        .sum()
}

/// Mean `D_KL(target ‖ candidate)` over records, with the candidate
/// evaluated without viewpoints, and its analytic gradient.
pub fn kl_objective(dataset: &DistillDataset, candidate: &StudentPolicy) -> Result<(f64, Weights), DistillError> {
    if candidate.feature_version != FEATURE_VERSION {
        return Err(DistillError::FeatureVersionMismatch {
            found: candidate.feature_version,
        });
    }
    let empty = ActiveViewpoints::default();
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    for rec in &dataset.records {
        let candidates = candidate_actions(&rec.state).map_err(|e| DistillError::Invalid(e.to_string()))?;
        let dist = distribution_for(candidate, &rec.state, &candidates, &empty);
        loss += kl(&rec.target_distribution, &dist.log_probs);
        let g = dist.kl_grad(&rec.target_distribution);
        for k in 0..FEATURE_DIM {
            grad[k] += g[k];
        }
    }
    let n = dataset.records.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub policy: StudentPolicy,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub lr: f64,
}

/// Full-batch gradient descent on any `(loss, gradient)` objective. Returns
/// the lowest-loss iterate, so the reported final loss never exceeds the
/// initial one.
fn descend<F>(init: &StudentPolicy, steps: usize, lr: f64, mut objective: F) -> Result<DistillOutcome, DistillError>
where
    F: FnMut(&StudentPolicy) -> Result<(f64, Weights), DistillError>,
{
    if steps == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(DistillError::Invalid("steps must be >= 1 and lr > 0".into()));
    }
    let mut current = init.clone();
    let (initial_loss, mut grad) = objective(&current)?;
    let mut best = (initial_loss, current.clone());
    let limit = DIVERGENCE_FACTOR * initial_loss.abs().max(1e-3);
    for step in 1..=steps {
        for k in 0..FEATURE_DIM {
            current.theta[k] -= lr * grad[k];
        }
        let (loss, g) = objective(&current)?;
        if !loss.is_finite() || loss > limit || current.theta.iter().any(|t| !t.is_finite()) {
            return Err(DistillError::NonFiniteLoss { step, loss });
        }
        if loss < best.0 {
            best = (loss, current.clone());
        }
        grad = g;
    }
    Ok(DistillOutcome {
        policy: best.1,
        initial_loss,
        final_loss: best.0,
        steps,
        lr,
    })
}

pub fn distill(dataset: &DistillDataset, init: &StudentPolicy, steps: usize, lr: f64) -> Result<DistillOutcome, DistillError> {
    descend(init, steps, lr, |p| kl_objective(dataset, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairConstruction {
    WithViewpointVsWithout,
    WithViewpointVsNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: TaskSpec,
    pub preferred_trace: Trace,
    pub rejected_trace: Trace,
    pub construction: PairConstruction,
}

/// The guided set with every bias sign-flipped.
pub fn negative_viewpoints(active: &ActiveViewpoints) -> ActiveViewpoints {
    ActiveViewpoints::from_viewpoints(
        active
            .iter()
            .map(|v| v.sign_flipped(ViewpointId(format!("{}-neg", v.id))))
            .collect(),
    )
}

/// Pairs a guided rollout with an unguided (or negatively guided) rollout
/// of the same task under the same random stream. Pairs whose action
/// sequences coincide, or where the preferred trace scored lower, are
/// dropped.
pub fn build_preference_pairs(
    policy: &StudentPolicy,
    active: &ActiveViewpoints,
    tasks: &[TaskSpec],
    rollouts_per_task: usize,
    construction: PairConstruction,
    rng: &mut RngStream,
) -> Vec<PreferencePair> {
    let base = rng.seed();
    let rejected_set = match construction {
        PairConstruction::WithViewpointVsWithout => ActiveViewpoints::default(),
        PairConstruction::WithViewpointVsNegative => negative_viewpoints(active),
    };
    let mut pairs = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        for r in 0..rollouts_per_task {
            let seed = crate::rng::derive_seed(base, &[i as u64, r as u64]);
            let preferred = rollout(task, policy, active, &mut RngStream::new(seed));
            let rejected = rollout(task, policy, &rejected_set, &mut RngStream::new(seed));
            let same = preferred
                .steps
                .iter()
                .map(|s| &s.action)
                .eq(rejected.steps.iter().map(|s| &s.action));
            if same || preferred.reward < rejected.reward {
                continue;
            }
            pairs.push(PreferencePair {
                prompt: task.clone(),
                preferred_trace: preferred,
                rejected_trace: rejected,
                construction,
            });
        }
    }
    pairs
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Implicit reward margin `(log π_c(y_w) − log π_ref(y_w)) − (log π_c(y_l) − log π_ref(y_l))`
/// for one pair, all evaluated without viewpoints.
pub fn preference_margin(pair: &PreferencePair, candidate: &StudentPolicy, reference: &StudentPolicy) -> f64 {
    let empty = ActiveViewpoints::default();
    let lp = |p: &StudentPolicy, t: &Trace| trace_log_prob(p, &empty, t);
    (lp(candidate, &pair.preferred_trace) - lp(reference, &pair.preferred_trace))
        - (lp(candidate, &pair.rejected_trace) - lp(reference, &pair.rejected_trace))
}

pub fn mean_margin(pairs: &[PreferencePair], candidate: &StudentPolicy, reference: &StudentPolicy) -> f64 {
    pairs.iter().map(|p| preference_margin(p, candidate, reference)).sum::<f64>() / pairs.len().max(1) as f64
}

/// `mean −log σ(β · margin)` and its analytic gradient in the candidate's θ.
pub fn dpo_loss(
    pairs: &[PreferencePair],
    candidate: &StudentPolicy,
    reference: &StudentPolicy,
    beta: f64,
) -> Result<(f64, Weights), DistillError> {
    if pairs.is_empty() {
        return Err(DistillError::EmptyPairs);
    }
    if candidate.feature_version != FEATURE_VERSION {
        return Err(DistillError::FeatureVersionMismatch {
            found: candidate.feature_version,
        });
    }
    if !(beta > 0.0) {
        return Err(DistillError::Invalid("beta must be positive".into()));
    }
    let empty = ActiveViewpoints::default();
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    for pair in pairs {
        let z = beta * preference_margin(pair, candidate, reference);
        loss -= log_sigmoid(z);
        // d/dθ −log σ(z) = −(1 − σ(z)) · β · (∇log π_c(y_w) − ∇log π_c(y_l))
        let scale = -(1.0 - sigmoid(z)) * beta;
        let gw = trace_grad_log_prob(candidate, &empty, &pair.preferred_trace);
        let gl = trace_grad_log_prob(candidate, &empty, &pair.rejected_trace);
        for k in 0..FEATURE_DIM {
            grad[k] += scale * (gw[k] - gl[k]);
        }
    }
    let n = pairs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

pub fn dpo_train(
    pairs: &[PreferencePair],
    init: &StudentPolicy,
    reference: &StudentPolicy,
    beta: f64,
    steps: usize,
    lr: f64,
) -> Result<DistillOutcome, DistillError> {
    descend(init, steps, lr, |p| dpo_loss(pairs, p, reference, beta))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

pub fn instruction_for(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::ParenViolation | ErrorClass::PrecedenceViolation => {
            "Solve the following, paying close attention to the order of operations."
        }
        ErrorClass::Miscompute => "Solve the following, computing every elementary operation exactly.",
    }
}

fn matches_class(class: ErrorClass, task: &TaskSpec) -> bool {
    match class {
        ErrorClass::ParenViolation => task.features.has_parens,
        ErrorClass::PrecedenceViolation => task.features.has_mixed_precedence,
        ErrorClass::Miscompute => true,
    }
}

/// One instruction example per (viewpoint, matching task), deduplicated on
/// `(instruction, input)` in first-seen order.
pub fn export_instructions(kb: &KnowledgeBase, tasks: &[TaskSpec]) -> Vec<InstructionRecord> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for v in kb.iter() {
        for task in tasks.iter().filter(|t| matches_class(v.error_class, t)) {
            let rec = InstructionRecord {
                instruction: instruction_for(v.error_class).to_string(),
                input: task.expression.render_compact(),
                output: task.oracle_value.to_string(),
            };
            if seen.insert((rec.instruction.clone(), rec.input.clone())) {
                out.push(rec);
            }
        }
    }
    out
}

pub fn write_instructions<W: Write>(mut out: W, records: &[InstructionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("instruction serializes"))?;
    }
    Ok(())
}

pub fn read_instructions<R: BufRead>(input: R) -> Result<Vec<InstructionRecord>, String> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|(i, l)| {
            let l = l.map_err(|e| e.to_string())?;
            serde_json::from_str(&l).map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMethod {
    #[default]
    Kl,
    Dpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub episode: u64,
    pub method: DistillMethod,
    pub records: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub lr: f64,
    pub guided_score: f64,
    pub distilled_score: f64,
    pub retention: Option<f64>,
}
