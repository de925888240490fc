//! Utility scoring of viewpoints on a held-out probe set.
//!
//! `U(v) = Score(π_S | V ∪ {v}) − Score(π_S | V)`, estimated with common
//! random numbers: rollout `(i, j)` uses the same derived seed in both arms,
//! so policy-identical arms produce identical traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{generate_tasks, GeneratorConfig, InvalidConfig, TaskSpec};
use crate::rng::{label, RngStream};
use crate::student::StudentPolicy;
use crate::trace::rollout;
use crate::viewpoint::{ActiveViewpoints, Viewpoint, ViewpointId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub generator: GeneratorConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            tasks: 50,
            samples_per_task: 32,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub tasks: Vec<TaskSpec>,
    pub samples_per_task: usize,
    pub master_seed: u64,
}

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("viewpoint {0} is already active")]
    AlreadyActive(ViewpointId),
    #[error("probe set must have at least one task and one sample per task")]
    EmptyProbeSet,
    #[error(transparent)]
    Config(#[from] InvalidConfig),
}

impl ProbeSet {
    pub fn new(tasks: Vec<TaskSpec>, samples_per_task: usize, master_seed: u64) -> Result<Self, MetaError> {
        if tasks.is_empty() || samples_per_task == 0 {
            return Err(MetaError::EmptyProbeSet);
        }
        Ok(Self {
            tasks,
            samples_per_task,
            master_seed,
        })
    }

    /// Draws the probe tasks from a stream reserved for probes, disjoint from
    /// the training-task stream.
    pub fn generate(master_seed: u64, cfg: &ProbeConfig) -> Result<Self, MetaError> {
        let tasks = generate_tasks(master_seed, label::PROBE_TASKS, cfg.tasks, &cfg.generator)?;
        Self::new(tasks, cfg.samples_per_task, master_seed)
    }

    fn rollout_rng(&self, task: usize, sample: usize) -> RngStream {
        RngStream::derived(self.master_seed, &[label::PROBE_ROLLOUT, task as u64, sample as u64])
    }
}

/// Success rate per probe task, in task order.
pub fn per_task_scores(policy: &StudentPolicy, active: &ActiveViewpoints, probes: &ProbeSet) -> Vec<f64> {
    let k = probes.samples_per_task;
    probes
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let successes = (0..k)
                .filter(|&j| rollout(task, policy, active, &mut probes.rollout_rng(i, j)).succeeded())
                .count();
            successes as f64 / k as f64
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean success rate over probe tasks.
pub fn estimate_score(policy: &StudentPolicy, active: &ActiveViewpoints, probes: &ProbeSet) -> f64 {
    mean(&per_task_scores(policy, active, probes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub viewpoint_id: ViewpointId,
    pub u_estimate: f64,
    pub std_error: f64,
    pub per_task_deltas: Vec<f64>,
    pub score_with: f64,
    pub score_without: f64,
}

impl UtilityReport {
    /// Paired comparison of two per-task score vectors (`with − without`).
    pub fn from_scores(viewpoint_id: ViewpointId, with: &[f64], without: &[f64]) -> Self {
        let deltas: Vec<f64> = with.iter().zip(without).map(|(a, b)| a - b).collect();
        let n = deltas.len() as f64;
        let u = mean(&deltas);
        let std_error = if deltas.len() > 1 {
            let var = deltas.iter().map(|d| (d - u).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self {
            viewpoint_id,
            u_estimate: u,
            std_error,
            per_task_deltas: deltas,
            score_with: mean(with),
            score_without: mean(without),
        }
    }

    /// True when the estimate is significantly negative.
    pub fn significantly_negative(&self) -> bool {
        self.u_estimate + 2.0 * self.std_error < 0.0
    }
}

/// Utility of adding `v` to `active`.
pub fn utility(
    v: &Viewpoint,
    policy: &StudentPolicy,
    active: &ActiveViewpoints,
    probes: &ProbeSet,
) -> Result<UtilityReport, MetaError> {
    if active.contains(&v.id) {
        return Err(MetaError::AlreadyActive(v.id.clone()));
    }
    let with = per_task_scores(policy, &active.with(v), probes);
    let without = per_task_scores(policy, active, probes);
    Ok(UtilityReport::from_scores(v.id.clone(), &with, &without))
}
