//! Linear-softmax student policy over reduction actions.
//!
//! Logits are `w · φ(s, a) / T` where `w = θ + Σ bias_v` over the active
//! viewpoints whose trigger matches the state. Logits are computed from
//! feature differences against the first candidate. This is the same
//! distribution (softmax is shift invariant), but a weight on a feature
//! that has the same value for every candidate contributes exactly zero, so
//! such viewpoints leave the distribution bit-for-bit unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::trace::{candidate_actions, Action, Mode, TokenSeq, Trace, TraceError};
use crate::viewpoint::ActiveViewpoints;

pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 9;

pub mod feature {
    pub const CROSSES_PAREN: usize = 0;
    pub const INNERMOST_PAREN: usize = 1;
    pub const MAX_PRECEDENCE: usize = 2;
    pub const LEFTMOST: usize = 3;
    pub const EXACT_MODE: usize = 4;
    pub const OP_IS_MUL: usize = 5;
    pub const OP_IS_ADD: usize = 6;
    pub const OP_IS_SUB: usize = 7;
    pub const CONSTANT: usize = 8;
}

pub type Weights = [f64; FEATURE_DIM];

/// Feature vector of one action, layout version 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub Weights);

impl FeatureVector {
    pub fn of(action: &Action) -> Self {
        use crate::expr::Operator;
        let r = &action.redex;
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        FeatureVector([
            b(r.crosses_paren),
            b(r.innermost_paren),
            b(r.max_precedence),
            b(r.leftmost),
            b(action.mode == Mode::Exact),
            b(r.operator == Operator::Mul),
            b(r.operator == Operator::Add),
            b(r.operator == Operator::Sub),
            1.0,
        ])
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("feature version {found} does not match supported version {FEATURE_VERSION}")]
    FeatureVersionMismatch { found: u32 },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentPolicy {
    pub feature_version: u32,
    pub theta: Weights,
    pub temperature: f64,
}

impl StudentPolicy {
    pub fn new(theta: Weights, temperature: f64) -> Self {
        Self {
            feature_version: FEATURE_VERSION,
            theta,
            temperature,
        }
    }

    pub fn zeros() -> Self {
        Self::new([0.0; FEATURE_DIM], 1.0)
    }

    /// Computes exactly but ignores parenthesis and precedence structure:
    /// every weight is zero except `exact_mode = +2`.
    pub fn paren_blind() -> Self {
        let mut theta = [0.0; FEATURE_DIM];
        theta[feature::EXACT_MODE] = 2.0;
        Self::new(theta, 1.0)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.feature_version != FEATURE_VERSION {
            return Err(PolicyError::FeatureVersionMismatch {
                found: self.feature_version,
            });
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(PolicyError::Invalid("temperature must be positive".into()));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(PolicyError::Invalid("theta has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let json = serde_json::to_string_pretty(self)?;
        crate::write_atomic(path, format!("{json}\n").as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(found) = value.get("feature_version").and_then(|v| v.as_u64()) {
            if found != u64::from(FEATURE_VERSION) {
                return Err(PolicyError::FeatureVersionMismatch { found: found as u32 });
            }
        }
        let policy: StudentPolicy = serde_json::from_value(value)?;
        policy.validate()?;
        Ok(policy)
    }
}

/// Policy weights plus every applicable viewpoint bias for state `s`.
pub fn effective_weights(policy: &StudentPolicy, s: &TokenSeq, active: &ActiveViewpoints) -> Weights {
    let mut w = policy.theta;
    for v in active.iter() {
        if v.trigger.applies(s) {
            for (&k, &delta) in &v.bias_spec {
                w[k] += delta;
            }
        }
    }
    w
}

/// Action distribution at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub actions: Vec<Action>,
    pub features: Vec<FeatureVector>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub temperature: f64,
}

impl ActionDistribution {
    /// Inverse-CDF draw using one uniform from `rng`.
    pub fn sample_index(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| -p * lp)
            .sum()
    }

    /// Gradient of `log π(a_idx)` with respect to θ:
    /// `(φ(a) − Σ_b π(b) φ(b)) / T`, using differences against the first
    /// candidate so constant features get exactly zero.
    pub fn grad_log_prob(&self, idx: usize) -> Weights {
        let base = &self.features[0].0;
        let mut g = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            let mean: f64 = self
                .features
                .iter()
                .zip(&self.probs)
                .map(|(f, p)| p * (f.0[k] - base[k]))
                .sum();
            g[k] = ((self.features[idx].0[k] - base[k]) - mean) / self.temperature;
        }
        g
    }

    /// `Σ_a (q(a) − p(a)) φ(a) / T` for a target distribution `p` and this
    /// distribution as `q`: the gradient of `KL(p ‖ q)` with respect to θ.
    pub fn kl_grad(&self, target: &[f64]) -> Weights {
        let base = &self.features[0].0;
        let mut g = [0.0; FEATURE_DIM];
        for (i, f) in self.features.iter().enumerate() {
            let coef = (self.probs[i] - target[i]) / self.temperature;
            for k in 0..FEATURE_DIM {
                g[k] += coef * (f.0[k] - base[k]);
            }
        }
        g
    }
}

/// Distribution over an already-enumerated candidate list.
pub fn distribution_for(
    policy: &StudentPolicy,
    s: &TokenSeq,
    candidates: &[Action],
    active: &ActiveViewpoints,
) -> ActionDistribution {
    let w = effective_weights(policy, s, active);
    let features: Vec<FeatureVector> = candidates.iter().map(FeatureVector::of).collect();
    let base = features[0].0;
    let logits: Vec<f64> = features
        .iter()
        .map(|f| {
            let mut z = 0.0;
            for k in 0..FEATURE_DIM {
                let d = f.0[k] - base[k];
                if d != 0.0 {
                    z += w[k] * d;
                }
            }
            z / policy.temperature
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    ActionDistribution {
        actions: candidates.to_vec(),
        features,
        probs,
        log_probs,
        temperature: policy.temperature,
    }
}

pub fn action_distribution(
    policy: &StudentPolicy,
    s: &TokenSeq,
    active: &ActiveViewpoints,
) -> Result<ActionDistribution, TraceError> {
    let candidates = candidate_actions(s)?;
    Ok(distribution_for(policy, s, &candidates, active))
}

pub fn sample_action(
    policy: &StudentPolicy,
    s: &TokenSeq,
    active: &ActiveViewpoints,
    rng: &mut RngStream,
) -> Result<(Action, f64), TraceError> {
    let dist = action_distribution(policy, s, active)?;
    let idx = dist.sample_index(rng);
    Ok((dist.actions[idx], dist.log_probs[idx]))
}

/// Log-probability of the trace's action sequence under `policy` with the
/// given conditioning.
pub fn trace_log_prob(policy: &StudentPolicy, active: &ActiveViewpoints, trace: &Trace) -> f64 {
    trace
        .steps
        .iter()
        .map(|step| {
            let dist = distribution_for(policy, &step.state_before, &step.candidates, active);
            dist.log_probs[step.action_index()]
        })
        .sum()
}

/// `∇_θ log π(τ)` summed over steps.
pub fn trace_grad_log_prob(policy: &StudentPolicy, active: &ActiveViewpoints, trace: &Trace) -> Weights {
    let mut g = [0.0; FEATURE_DIM];
    for step in &trace.steps {
        let dist = distribution_for(policy, &step.state_before, &step.candidates, active);
        let gs = dist.grad_log_prob(step.action_index());
        for k in 0..FEATURE_DIM {
            g[k] += gs[k];
        }
    }
    g
}

/// Mean Shannon entropy (nats) over non-terminal probe states.
pub fn policy_entropy(policy: &StudentPolicy, active: &ActiveViewpoints, probe_states: &[TokenSeq]) -> f64 {
    let entropies: Vec<f64> = probe_states
        .iter()
        .filter_map(|s| action_distribution(policy, s, active).ok())
        .map(|d| d.entropy())
        .collect();
    if entropies.is_empty() {
        0.0
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub policy: StudentPolicy,
    pub baseline: f64,
    pub learning_rate: f64,
    pub episodes_seen: u64,
}

impl LearnerState {
    pub fn new(policy: StudentPolicy, learning_rate: f64) -> Self {
        Self {
            policy,
            baseline: 0.0,
            learning_rate,
            episodes_seen: 0,
        }
    }

    /// One REINFORCE step with a running-mean baseline:
    /// `θ ← θ + α (R − b) Σ_t ∇ log π(a_t | s_t, V)`, then `b` absorbs `R`.
    /// `active` must be the conditioning the trace was sampled under.
    pub fn reinforce_update(&mut self, trace: &Trace, active: &ActiveViewpoints) {
        let reward = f64::from(trace.reward);
        let advantage = reward - self.baseline;
        if advantage != 0.0 {
            let g = trace_grad_log_prob(&self.policy, active, trace);
            for k in 0..FEATURE_DIM {
                self.policy.theta[k] += self.learning_rate * advantage * g[k];
            }
        }
        self.episodes_seen += 1;
        self.baseline += (reward - self.baseline) / self.episodes_seen as f64;
    }
}
