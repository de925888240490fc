//! The episode loop: act, critique, evaluate the critique, distill.
//!
//! Each episode samples a training task, rolls the student out, and applies
//! REINFORCE. Guided arms additionally ask the teacher for a viewpoint on
//! failure, score it on the probe set, feed the score back to the template
//! bandit, and keep it active. The full arm periodically distills the guided
//! behaviour into the bare student and clears the active set.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    build_distill_dataset, build_preference_pairs, distill, dpo_train, DistillMethod, DistillReport, PairConstruction,
};
use crate::expr::{generate_task, GeneratorConfig, TaskSpec};
use crate::meta::{estimate_score, utility, ProbeConfig, ProbeSet};
use crate::rng::{label, RngStream};
use crate::student::{distribution_for, LearnerState, StudentPolicy, Weights};
use crate::teacher::{ProposalContext, RuleBasedTeacher, Teacher, TemplateBank};
use crate::trace::{rollout, Trace};
use crate::viewpoint::{ActiveViewpoints, KnowledgeBase, UtilityStats, ViewpointId, DEFAULT_ACTIVE_CAPACITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    OutcomeOnly,
    ViewpointGuided,
    #[default]
    FullSocratic,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::OutcomeOnly => "outcome-only",
            Arm::ViewpointGuided => "viewpoint-guided",
            Arm::FullSocratic => "full-socratic",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        [Arm::OutcomeOnly, Arm::ViewpointGuided, Arm::FullSocratic]
            .into_iter()
            .find(|a| a.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyInit {
    #[default]
    ParenBlind,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub temperature: f64,
    pub init: PolicyInit,
    /// Explicit starting weights; overrides `init`.
    pub theta: Option<Weights>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            temperature: 1.0,
            init: PolicyInit::ParenBlind,
            theta: None,
        }
    }
}

impl LearnerConfig {
    pub fn initial_policy(&self) -> StudentPolicy {
        let theta = self.theta.unwrap_or(match self.init {
            PolicyInit::ParenBlind => StudentPolicy::paren_blind().theta,
            PolicyInit::Zeros => [0.0; crate::student::FEATURE_DIM],
        });
        StudentPolicy::new(theta, self.temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub method: DistillMethod,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    /// Rollouts per task when building the data set or preference pairs.
    pub rollouts: usize,
    /// How many of the most recent training tasks feed the data set.
    pub recent_tasks: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: DistillMethod::Kl,
            steps: 300,
            lr: 2.0,
            beta: 0.5,
            rollouts: 4,
            recent_tasks: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub episodes: u64,
    pub distill_interval: u64,
    pub arm: Arm,
    pub generator: GeneratorConfig,
    pub probe: ProbeConfig,
    pub learner: LearnerConfig,
    pub bandit_c: f64,
    pub prune_negative: bool,
    pub active_capacity: usize,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            episodes: 2000,
            distill_interval: 500,
            arm: Arm::FullSocratic,
            generator: GeneratorConfig::default(),
            probe: ProbeConfig::default(),
            learner: LearnerConfig::default(),
            bandit_c: std::f64::consts::SQRT_2,
            prune_negative: true,
            active_capacity: DEFAULT_ACTIVE_CAPACITY,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("episode {episode}: {message}")]
    Episode { episode: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be >= 1");
        }
        if self.distill_interval == 0 {
            return bad("distill_interval must be >= 1");
        }
        if !(self.learner.learning_rate > 0.0 && self.learner.learning_rate.is_finite()) {
            return bad("learner.learning_rate must be positive");
        }
        if !(self.learner.temperature > 0.0 && self.learner.temperature.is_finite()) {
            return bad("learner.temperature must be positive");
        }
        if !(self.bandit_c >= 0.0 && self.bandit_c.is_finite()) {
            return bad("bandit_c must be >= 0");
        }
        if self.active_capacity == 0 {
            return bad("active_capacity must be >= 1");
        }
        if self.probe.tasks == 0 || self.probe.samples_per_task == 0 {
            return bad("probe.tasks and probe.samples_per_task must be >= 1");
        }
        if self.distill.steps == 0 || !(self.distill.lr > 0.0) || !(self.distill.beta > 0.0) {
            return bad("distill.steps, distill.lr and distill.beta must be positive");
        }
        if self.distill.rollouts == 0 || self.distill.recent_tasks == 0 {
            return bad("distill.rollouts and distill.recent_tasks must be >= 1");
        }
        self.generator.validate().map_err(|e| RunError::Config(format!("generator: {}", e.0)))?;
        self.probe
            .generator
            .validate()
            .map_err(|e| RunError::Config(format!("probe.generator: {}", e.0)))?;
        Ok(())
    }
}

pub const METRICS_HEADER: &str =
    "episode,arm,reward,success_rate_ma100,active_viewpoints,kb_size,mean_entropy,last_utility,distill_event";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub episode: u64,
    pub arm: Arm,
    pub reward: u8,
    pub success_rate_ma100: f64,
    pub active_viewpoints: usize,
    pub kb_size: usize,
    pub mean_entropy: f64,
    pub last_utility: Option<f64>,
    pub distill_event: bool,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.4},{},{},{:.6},{},{}",
            self.episode,
            self.arm.as_str(),
            self.reward,
            self.success_rate_ma100,
            self.active_viewpoints,
            self.kb_size,
            self.mean_entropy,
            self.last_utility.map(|u| format!("{u:.6}")).unwrap_or_default(),
            u8::from(self.distill_event),
        )
    }

    pub fn from_csv(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(format!("expected 9 fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("field {}: {e}", i + 1));
        Ok(Self {
            episode: int(0)?,
            arm: Arm::parse(f[1]).ok_or_else(|| format!("unknown arm {:?}", f[1]))?,
            reward: int(2)? as u8,
            success_rate_ma100: num(3)?,
            active_viewpoints: int(4)? as usize,
            kb_size: int(5)? as usize,
            mean_entropy: num(6)?,
            last_utility: if f[7].is_empty() { None } else { Some(num(7)?) },
            distill_event: int(8)? == 1,
        })
    }
}

pub fn write_metrics(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        Some(h) => return Err(format!("unexpected metrics header {h:?}")),
        None => return Err("empty metrics file".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::from_csv(l.trim_end()).map_err(|e| format!("line {}: {e}", i + 2)))
        .collect()
}

/// First episode, once the window holds 100 episodes, at which the 100-episode
/// moving average of reward reaches `threshold`.
pub fn episodes_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<u64> {
    rows.iter()
        .find(|r| r.episode >= MA_WINDOW as u64 && r.success_rate_ma100 >= threshold)
        .map(|r| r.episode)
}

const MA_WINDOW: usize = 100;

#[derive(Debug, Clone)]
pub struct RunState {
    pub episode: u64,
    pub learner: LearnerState,
    pub active: ActiveViewpoints,
    pub kb: KnowledgeBase,
    pub teacher: RuleBasedTeacher,
    pub probes: ProbeSet,
    pub metrics: Vec<MetricsRow>,
    pub distill_reports: Vec<DistillReport>,
    /// Policy right after each distillation event.
    pub checkpoints: Vec<(u64, StudentPolicy)>,
    pub teacher_calls: u64,
    pub meta_calls: u64,
    pub last_trace: Option<Trace>,
    recent_rewards: VecDeque<u8>,
    recent_tasks: VecDeque<TaskSpec>,
}

impl RunState {
    pub fn new(cfg: &RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let probes = ProbeSet::generate(cfg.master_seed, &cfg.probe).map_err(|e| RunError::Config(e.to_string()))?;
        Ok(Self {
            episode: 0,
            learner: LearnerState::new(cfg.learner.initial_policy(), cfg.learner.learning_rate),
            active: ActiveViewpoints::with_capacity(cfg.active_capacity),
            kb: KnowledgeBase::new(),
            teacher: RuleBasedTeacher::new(TemplateBank::with_exploration(cfg.bandit_c)),
            probes,
            metrics: Vec::new(),
            distill_reports: Vec::new(),
            checkpoints: Vec::new(),
            teacher_calls: 0,
            meta_calls: 0,
            last_trace: None,
            recent_rewards: VecDeque::with_capacity(MA_WINDOW),
            recent_tasks: VecDeque::new(),
        })
    }

    pub fn policy(&self) -> &StudentPolicy {
        &self.learner.policy
    }

    fn moving_average(&self) -> f64 {
        let n = self.recent_rewards.len().max(1) as f64;
        self.recent_rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / n
    }
}

fn mean_entropy(policy: &StudentPolicy, active: &ActiveViewpoints, trace: &Trace) -> f64 {
    if trace.steps.is_empty() {
        return 0.0;
    }
    trace
        .steps
        .iter()
        .map(|s| distribution_for(policy, &s.state_before, &s.candidates, active).entropy())
        .sum::<f64>()
        / trace.steps.len() as f64
}

/// Advances the run by one episode.
pub fn run_episode(state: &mut RunState, cfg: &RunConfig) -> Result<(), RunError> {
    state.episode += 1;
    let k = state.episode;
    let fail = |message: String| RunError::Episode { episode: k, message };

    // Act.
    let mut task_rng = RngStream::derived(cfg.master_seed, &[label::TRAIN_TASK, k]);
    let task = generate_task(&mut task_rng, &cfg.generator).map_err(|e| fail(e.to_string()))?;
    let mut rollout_rng = RngStream::derived(cfg.master_seed, &[label::TRAIN_ROLLOUT, k]);
    let trace = rollout(&task, &state.learner.policy, &state.active, &mut rollout_rng);
    let entropy = mean_entropy(&state.learner.policy, &state.active, &trace);
    state.learner.reinforce_update(&trace, &state.active);

    // Critique and evaluate the critique.
    let mut last_utility = None;
    if trace.reward == 0 && cfg.arm != Arm::OutcomeOnly {
        state.teacher_calls += 1;
        if let Some(finding) = state.teacher.analyze(&trace) {
            let ctx = ProposalContext {
                viewpoint_id: ViewpointId(format!("vp-{:05}", state.kb.len())),
                trace_id: format!("ep-{k:06}"),
                episode: k,
            };
            let (mut v, key) = state.teacher.propose(&trace, &finding, &ctx).map_err(|e| fail(e.to_string()))?;
            state.meta_calls += 1;
            let report =
                utility(&v, &state.learner.policy, &state.active, &state.probes).map_err(|e| fail(e.to_string()))?;
            state.teacher.feedback(&key, report.u_estimate).map_err(|e| fail(e.to_string()))?;
            v.utility = Some(UtilityStats {
                estimate: report.u_estimate,
                std_error: report.std_error,
                probes: (state.probes.tasks.len() * state.probes.samples_per_task) as u64,
            });
            let id = v.id.clone();
            state.kb.append(v).map_err(|e| fail(e.to_string()))?;
            if !(cfg.prune_negative && report.significantly_negative()) {
                state.active.activate(&state.kb, &id).map_err(|e| fail(e.to_string()))?;
            }
            last_utility = Some(report.u_estimate);
        }
    }

    state.recent_tasks.push_back(task);
    if state.recent_tasks.len() > cfg.distill.recent_tasks {
        state.recent_tasks.pop_front();
    }

    // Distill.
    let distill_event = cfg.arm == Arm::FullSocratic && k.is_multiple_of(cfg.distill_interval);
    if distill_event {
        distill_now(state, cfg).map_err(|e| fail(e.to_string()))?;
    }

    state.recent_rewards.push_back(trace.reward);
    if state.recent_rewards.len() > MA_WINDOW {
        state.recent_rewards.pop_front();
    }
    state.metrics.push(MetricsRow {
        episode: k,
        arm: cfg.arm,
        reward: trace.reward,
        success_rate_ma100: state.moving_average(),
        active_viewpoints: state.active.len(),
        kb_size: state.kb.len(),
        mean_entropy: entropy,
        last_utility,
        distill_event,
    });
    state.last_trace = Some(trace);
    Ok(())
}

fn distill_now(state: &mut RunState, cfg: &RunConfig) -> Result<(), crate::distill::DistillError> {
    let k = state.episode;
    let tasks: Vec<TaskSpec> = state.recent_tasks.iter().cloned().collect();
    let mut rng = RngStream::derived(cfg.master_seed, &[label::DISTILL, k]);
    let current = state.learner.policy.clone();
    let (outcome, records) = match cfg.distill.method {
        DistillMethod::Kl => {
            let ds = build_distill_dataset(&current, &state.active, &tasks, cfg.distill.rollouts, &mut rng);
            (distill(&ds, &current, cfg.distill.steps, cfg.distill.lr)?, ds.len())
        }
        DistillMethod::Dpo => {
            let pairs = build_preference_pairs(
                &current,
                &state.active,
                &tasks,
                cfg.distill.rollouts,
                PairConstruction::WithViewpointVsWithout,
                &mut rng,
            );
            let out = dpo_train(&pairs, &current, &current, cfg.distill.beta, cfg.distill.steps, cfg.distill.lr)?;
            (out, pairs.len())
        }
    };
    state.meta_calls += 1;
    let guided_score = estimate_score(&current, &state.active, &state.probes);
    let distilled_score = estimate_score(&outcome.policy, &ActiveViewpoints::default(), &state.probes);
    state.distill_reports.push(DistillReport {
        episode: k,
        method: cfg.distill.method,
        records,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        steps: outcome.steps,
        lr: outcome.lr,
        guided_score,
        distilled_score,
        retention: (guided_score > 0.0).then(|| distilled_score / guided_score),
    });
    state.learner.policy = outcome.policy;
    state.checkpoints.push((k, state.learner.policy.clone()));
    state.active.reset();
    Ok(())
}

/// Runs every episode in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunState, RunError> {
    let mut state = RunState::new(cfg)?;
    for _ in 0..cfg.episodes {
        run_episode(&mut state, cfg)?;
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub kb: PathBuf,
    pub bank: PathBuf,
    pub distill_reports: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_success_rate: f64,
    pub kb_size: usize,
}

/// Runs the experiment and writes its artifacts into `out_dir`. Nothing is
/// written until every episode has completed.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts, RunError> {
    let state = execute(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let metrics = out_dir.join("metrics.csv");
    crate::write_atomic(&metrics, write_metrics(&state.metrics).as_bytes())?;
    let kb = out_dir.join("kb.jsonl");
    state.kb.save(&kb).map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))?;
    let bank = out_dir.join("bank.json");
    state
        .teacher
        .bank
        .save(&bank)
        .map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))?;
    let distill_reports = out_dir.join("distill_reports.json");
    let json = serde_json::to_string_pretty(&state.distill_reports).expect("reports serialize");
    crate::write_atomic(&distill_reports, format!("{json}\n").as_bytes())?;
    let mut checkpoints = Vec::new();
    for (episode, policy) in &state.checkpoints {
        let path = out_dir.join(format!("policy_ep{episode:06}.json"));
        policy.save(&path).map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))?;
        checkpoints.push(path);
    }
    let last = out_dir.join("policy_final.json");
    state
        .learner
        .policy
        .save(&last)
        .map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))?;
    checkpoints.push(last);
    Ok(RunArtifacts {
        metrics,
        kb,
        bank,
        distill_reports,
        checkpoints,
        final_success_rate: state.metrics.last().map_or(0.0, |r| r.success_rate_ma100),
        kb_size: state.kb.len(),
    })
}
