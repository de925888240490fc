//! Rule-based teacher: root-cause analysis of failed traces, viewpoint
//! generation from a template bank, and UCB1 selection over templates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Token;
use crate::student::{feature, FEATURE_DIM};
use crate::trace::{redex_priority, Step, Trace};
use crate::viewpoint::{ErrorClass, Provenance, Trigger, Viewpoint, ViewpointId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorFinding {
    pub step_index: usize,
    pub error_class: ErrorClass,
    pub detail: String,
}

/// Checks one step in priority order: miscompute, then parenthesis
/// violation, then a value-changing precedence violation.
pub fn check_step(step_index: usize, step: &Step) -> Option<ErrorFinding> {
    let tokens = step.state_before.tokens();
    let redex = &step.action.redex;
    let (Token::Number(lhs), Token::Number(rhs)) = (tokens[redex.left_idx], tokens[redex.right_idx]) else {
        return None;
    };
    let exact = redex.operator.apply(lhs, rhs);
    if step.computed_value != exact {
        return Some(ErrorFinding {
            step_index,
            error_class: ErrorClass::Miscompute,
            detail: format!(
                "computed {lhs} {} {rhs} = {} instead of {exact}",
                redex.operator, step.computed_value
            ),
        });
    }
    if redex.crosses_paren {
        return Some(ErrorFinding {
            step_index,
            error_class: ErrorClass::ParenViolation,
            detail: format!(
                "reduced {lhs} {} {rhs} across a parenthesis boundary in `{}`",
                redex.operator, step.state_before
            ),
        });
    }
    let chosen_priority = redex_priority(tokens, redex);
    let preferred = step.candidates.iter().map(|a| &a.redex).find(|other| {
        *other != redex
            && (other.innermost_paren && !redex.innermost_paren
                || redex_priority(tokens, other) > chosen_priority
                || other.max_precedence && other.leftmost)
    });
    if let Some(other) = preferred {
        let before = step.state_before.evaluate().ok();
        let after = step.state_after.evaluate().ok();
        if before != after {
            let (Token::Number(a), Token::Number(b)) = (tokens[other.left_idx], tokens[other.right_idx]) else {
                return None;
            };
            return Some(ErrorFinding {
                step_index,
                error_class: ErrorClass::PrecedenceViolation,
                detail: format!(
                    "reduced {lhs} {} {rhs} before {a} {} {b} in `{}`",
                    redex.operator, other.operator, step.state_before
                ),
            });
        }
    }
    None
}

/// Earliest error in the trace, if any.
pub fn analyze_trace(trace: &Trace) -> Option<ErrorFinding> {
    trace
        .steps
        .iter()
        .enumerate()
        .find_map(|(i, step)| check_step(i, step))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub template_id: String,
    pub error_class: ErrorClass,
    /// May contain `{input}`, `{state}` and `{step}` placeholders.
    pub principle_text: String,
    pub bias_spec: BTreeMap<usize, f64>,
    pub trigger: Trigger,
}

impl Template {
    fn new(id: &str, class: ErrorClass, text: &str, bias: &[(usize, f64)]) -> Self {
        Self {
            template_id: id.to_string(),
            error_class: class,
            principle_text: text.to_string(),
            bias_spec: bias.iter().copied().collect(),
            trigger: Trigger::Always,
        }
    }

    pub fn instantiate(&self, trace: &Trace, finding: &ErrorFinding) -> String {
        let state = trace
            .steps
            .get(finding.step_index)
            .map(|s| s.state_before.to_string())
            .unwrap_or_default();
        self.principle_text
            .replace("{input}", &trace.task.expression.render_compact())
            .replace("{state}", &state)
            .replace("{step}", &(finding.step_index + 1).to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmStats {
    pub pulls: u64,
    pub mean_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassArms {
    pub error_class: ErrorClass,
    pub templates: Vec<Template>,
    pub stats: Vec<ArmStats>,
}

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("no templates for error class {0}")]
    EmptyBank(ErrorClass),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("invalid template bank: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The teacher's learnable state: templates per error class with UCB1 arm
/// statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub exploration: f64,
    pub classes: Vec<ClassArms>,
}

pub const PAREN_PRINCIPLE: &str =
    "Principle: In multi-step arithmetic, always resolve expressions within parentheses before applying external operators.";

impl Default for TemplateBank {
    fn default() -> Self {
        Self::with_exploration(std::f64::consts::SQRT_2)
    }
}

impl TemplateBank {
    /// Default bank. Arm A is strong and correct, B is weak, and C only
    /// biases the constant feature, which has no effect on any distribution.
    pub fn with_exploration(exploration: f64) -> Self {
        use feature::*;
        use ErrorClass::*;
        let paren = vec![
            Template::new("paren-A", ParenViolation, PAREN_PRINCIPLE, &[(CROSSES_PAREN, -4.0), (INNERMOST_PAREN, 2.0)]),
            Template::new(
                "paren-B",
                ParenViolation,
                "Principle: A bracketed group is one number to the operators around it; finish it first (see step {step} of {input}).",
                &[(CROSSES_PAREN, -1.0)],
            ),
            Template::new("paren-C", ParenViolation, "Note: take extra care with {input}.", &[(CONSTANT, 1.0)]),
        ];
        let precedence = vec![
            Template::new(
                "prec-A",
                PrecedenceViolation,
                "Principle: Multiplication binds tighter than addition and subtraction; reduce the highest-precedence operation first, working left to right.",
                &[(MAX_PRECEDENCE, 3.0)],
            ),
            Template::new(
                "prec-B",
                PrecedenceViolation,
                "Principle: Check operator precedence before reducing; step {step} of {input} changed the value of `{state}`.",
                &[(MAX_PRECEDENCE, 0.5)],
            ),
            Template::new("prec-C", PrecedenceViolation, "Note: re-read {input} before answering.", &[(CONSTANT, 1.0)]),
        ];
        let miscompute = vec![
            Template::new(
                "calc-A",
                Miscompute,
                "Principle: Compute each elementary operation exactly as written; never substitute one operator for another.",
                &[(EXACT_MODE, 4.0)],
            ),
            Template::new(
                "calc-B",
                Miscompute,
                "Principle: Double-check the arithmetic of step {step} in {input}.",
                &[(EXACT_MODE, 1.0)],
            ),
            Template::new("calc-C", Miscompute, "Note: keep a steady pace through {input}.", &[(CONSTANT, 1.0)]),
        ];
        let arms = |error_class, templates: Vec<Template>| ClassArms {
            error_class,
            stats: vec![ArmStats::default(); templates.len()],
            templates,
        };
        Self {
            exploration,
            classes: vec![
                arms(ParenViolation, paren),
                arms(PrecedenceViolation, precedence),
                arms(Miscompute, miscompute),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        for class in &self.classes {
            if class.templates.len() != class.stats.len() {
                return Err(TeacherError::Invalid(format!("{} stats length mismatch", class.error_class)));
            }
            if class.templates.len() < 2 {
                return Err(TeacherError::Invalid(format!("{} needs at least two templates", class.error_class)));
            }
            for t in &class.templates {
                if t.bias_spec.keys().any(|k| *k >= FEATURE_DIM) || t.error_class != class.error_class {
                    return Err(TeacherError::Invalid(format!("template {}", t.template_id)));
                }
            }
        }
        Ok(())
    }

    pub fn arms(&self, class: ErrorClass) -> Option<&ClassArms> {
        self.classes.iter().find(|c| c.error_class == class)
    }

    /// UCB1 choice for `class`: untried arms first, else the argmax of
    /// `mean + c·sqrt(ln N / n)`. Ties go to the lowest index.
    pub fn select(&self, class: ErrorClass) -> Result<usize, TeacherError> {
        let arms = self
            .arms(class)
            .filter(|a| !a.templates.is_empty())
            .ok_or(TeacherError::EmptyBank(class))?;
        Ok(ucb1_select(&arms.stats, self.exploration))
    }

    pub fn template(&self, template_id: &str) -> Option<&Template> {
        self.classes
            .iter()
            .flat_map(|c| c.templates.iter())
            .find(|t| t.template_id == template_id)
    }

    pub fn stats(&self, template_id: &str) -> Option<ArmStats> {
        self.classes.iter().find_map(|c| {
            c.templates
                .iter()
                .position(|t| t.template_id == template_id)
                .map(|i| c.stats[i])
        })
    }

    /// Folds one utility observation into the pulled arm's running mean.
    pub fn record_utility(&mut self, template_id: &str, utility: f64) -> Result<(), TeacherError> {
        for class in &mut self.classes {
            if let Some(i) = class.templates.iter().position(|t| t.template_id == template_id) {
                let s = &mut class.stats[i];
                s.pulls += 1;
                s.mean_utility += (utility - s.mean_utility) / s.pulls as f64;
                return Ok(());
            }
        }
        Err(TeacherError::UnknownTemplate(template_id.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TeacherError> {
        let json = serde_json::to_string_pretty(self)?;
        crate::write_atomic(path, format!("{json}\n").as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TeacherError> {
        let bank: TemplateBank = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        bank.validate()?;
        Ok(bank)
    }
}

pub fn ucb1_select(stats: &[ArmStats], exploration: f64) -> usize {
    if let Some(i) = stats.iter().position(|s| s.pulls == 0) {
        return i;
    }
    let total: u64 = stats.iter().map(|s| s.pulls).sum();
    let ln_n = (total as f64).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in stats.iter().enumerate() {
        let score = s.mean_utility + exploration * (ln_n / s.pulls as f64).sqrt();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Where a generated viewpoint came from, for provenance stamping.
#[derive(Debug, Clone)]
pub struct ProposalContext {
    pub viewpoint_id: ViewpointId,
    pub trace_id: String,
    pub episode: u64,
}

/// Generates a viewpoint for `finding` using the UCB1-selected template.
pub fn generate_viewpoint(
    bank: &TemplateBank,
    finding: &ErrorFinding,
    trace: &Trace,
    ctx: &ProposalContext,
) -> Result<(Viewpoint, String), TeacherError> {
    let arms = bank
        .arms(finding.error_class)
        .filter(|a| !a.templates.is_empty())
        .ok_or(TeacherError::EmptyBank(finding.error_class))?;
    let template = &arms.templates[bank.select(finding.error_class)?];
    let mut v = Viewpoint::new(
        ctx.viewpoint_id.clone(),
        finding.error_class,
        template.instantiate(trace, finding),
        template.bias_spec.clone(),
        template.trigger,
    );
    v.provenance = Provenance {
        trace_id: ctx.trace_id.clone(),
        episode: ctx.episode,
        template_id: template.template_id.clone(),
    };
    Ok((v, template.template_id.clone()))
}

/// Trace in, viewpoint out. The loop talks to the teacher only through this
/// trait so another implementation can be swapped in.
pub trait Teacher {
    fn analyze(&self, trace: &Trace) -> Option<ErrorFinding>;

    /// Returns the viewpoint and an opaque key used to route utility
    /// feedback back to whatever produced it.
    fn propose(
        &mut self,
        trace: &Trace,
        finding: &ErrorFinding,
        ctx: &ProposalContext,
    ) -> Result<(Viewpoint, String), TeacherError>;

    fn feedback(&mut self, key: &str, utility: f64) -> Result<(), TeacherError>;
}

#[derive(Debug, Clone, Default)]
pub struct RuleBasedTeacher {
    pub bank: TemplateBank,
}

impl RuleBasedTeacher {
    pub fn new(bank: TemplateBank) -> Self {
        Self { bank }
    }
}

impl Teacher for RuleBasedTeacher {
    fn analyze(&self, trace: &Trace) -> Option<ErrorFinding> {
        analyze_trace(trace)
    }

    fn propose(
        &mut self,
        trace: &Trace,
        finding: &ErrorFinding,
        ctx: &ProposalContext,
    ) -> Result<(Viewpoint, String), TeacherError> {
        generate_viewpoint(&self.bank, finding, trace, ctx)
    }

    fn feedback(&mut self, key: &str, utility: f64) -> Result<(), TeacherError> {
        self.bank.record_utility(key, utility)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::TaskSpec;
    use crate::trace::{rollout_with, Mode};

    fn forced(task: &str, pick: impl Fn(&[crate::trace::Action]) -> usize) -> Trace {
        let task = TaskSpec::parse(task).unwrap();
        rollout_with(&task, vec![], 0, |_, c| (pick(c), 0.0))
    }

    fn legal(c: &[crate::trace::Action]) -> usize {
        c.iter()
            .position(|a| a.mode == Mode::Exact && a.redex.leftmost)
            .unwrap()
    }

    fn ctx() -> ProposalContext {
        ProposalContext {
            viewpoint_id: "vp-00001".into(),
            trace_id: "ep-000001".into(),
            episode: 1,
        }
    }

    #[test]
    fn crossing_reduction_is_paren_violation() {
        let trace = forced("(4+6)*3", |c| {
            c.iter()
                .position(|a| a.mode == Mode::Exact && a.redex.crosses_paren)
                .unwrap_or(0)
        });
        assert_eq!(trace.final_value, Some(22));
        let f = analyze_trace(&trace).unwrap();
        assert_eq!((f.step_index, f.error_class), (0, ErrorClass::ParenViolation));
    }

    #[test]
    fn legal_trace_has_no_finding() {
        let trace = forced("(4+6)*3 - 2*(1+1)", legal);
        assert_eq!(trace.reward, 1);
        assert_eq!(analyze_trace(&trace), None);
    }

    #[test]
    fn faulty_step_is_miscompute() {
        let trace = forced("2 + 3", |c| c.iter().position(|a| a.mode == Mode::Faulty).unwrap());
        assert_eq!(trace.final_value, Some(6));
        let f = analyze_trace(&trace).unwrap();
        assert_eq!((f.step_index, f.error_class), (0, ErrorClass::Miscompute));
    }

    #[test]
    fn value_changing_order_is_precedence_violation() {
        let trace = forced("1 + 2 * 3", |c| c.iter().position(|a| a.mode == Mode::Exact).unwrap());
        assert_eq!(trace.final_value, Some(9));
        let f = analyze_trace(&trace).unwrap();
        assert_eq!((f.step_index, f.error_class), (0, ErrorClass::PrecedenceViolation));

        let trace = forced("5 - 2 - 3", |c| {
            c.iter().position(|a| a.mode == Mode::Exact && !a.redex.leftmost).unwrap_or(0)
        });
        assert_eq!(trace.final_value, Some(6));
        assert_eq!(analyze_trace(&trace).unwrap().error_class, ErrorClass::PrecedenceViolation);
    }

    #[test]
    fn harmless_reordering_is_not_flagged() {
        // 2 * 3 * 4 reduced right first: still 24.
        let trace = forced("2 * 3 * 4", |c| {
            c.iter().rposition(|a| a.mode == Mode::Exact).unwrap()
        });
        assert_eq!(trace.reward, 1);
        assert_eq!(analyze_trace(&trace), None);
    }

    #[test]
    fn fresh_bank_picks_first_arm_with_verbatim_principle() {
        let trace = forced("(4+6)*3", |c| {
            c.iter().position(|a| a.mode == Mode::Exact && a.redex.crosses_paren).unwrap_or(0)
        });
        let finding = analyze_trace(&trace).unwrap();
        let bank = TemplateBank::default();
        let (v, tid) = generate_viewpoint(&bank, &finding, &trace, &ctx()).unwrap();
        assert_eq!(tid, "paren-A");
        assert_eq!(v.principle_text, PAREN_PRINCIPLE);
        assert_eq!(v.provenance.template_id, "paren-A");
        assert_eq!(v.bias_spec[&0], -4.0);
    }

    #[test]
    fn placeholders_are_filled_from_the_trace() {
        let trace = forced("(4+6)*3", |c| {
            c.iter().position(|a| a.mode == Mode::Exact && a.redex.crosses_paren).unwrap_or(0)
        });
        let finding = analyze_trace(&trace).unwrap();
        let bank = TemplateBank::default();
        let t = bank.template("paren-B").unwrap();
        assert!(t.instantiate(&trace, &finding).ends_with("(see step 1 of (4+6)*3)."));
    }

    #[test]
    fn ucb_prefers_best_mean_and_breaks_ties_low() {
        let stats = [
            ArmStats { pulls: 5, mean_utility: 0.3 },
            ArmStats { pulls: 5, mean_utility: 0.0 },
            ArmStats { pulls: 5, mean_utility: 0.0 },
        ];
        assert_eq!(ucb1_select(&stats, 2f64.sqrt()), 0);
        let tied = [ArmStats { pulls: 3, mean_utility: 0.1 }; 3];
        assert_eq!(ucb1_select(&tied, 2f64.sqrt()), 0);
        let untried = [ArmStats { pulls: 3, mean_utility: 0.9 }, ArmStats::default()];
        assert_eq!(ucb1_select(&untried, 2f64.sqrt()), 1);
    }

    #[test]
    fn record_utility_updates_one_arm() {
        let mut bank = TemplateBank::default();
        let before = bank.clone();
        bank.record_utility("paren-B", 0.2).unwrap();
        assert_eq!(bank.stats("paren-B"), Some(ArmStats { pulls: 1, mean_utility: 0.2 }));
        bank.record_utility("paren-B", 0.4).unwrap();
        let s = bank.stats("paren-B").unwrap();
        assert_eq!(s.pulls, 2);
        assert!((s.mean_utility - 0.3).abs() < 1e-15);
        for (c0, c1) in before.classes.iter().zip(&bank.classes) {
            for (t, (s0, s1)) in c0.templates.iter().zip(c0.stats.iter().zip(&c1.stats)) {
                if t.template_id != "paren-B" {
                    assert_eq!(s0, s1);
                }
            }
        }
        assert!(matches!(bank.record_utility("nope", 1.0), Err(TeacherError::UnknownTemplate(_))));
    }

    #[test]
    fn empty_class_is_reported() {
        let mut bank = TemplateBank::default();
        bank.classes.retain(|c| c.error_class != ErrorClass::Miscompute);
        let trace = forced("2 + 3", |c| c.iter().position(|a| a.mode == Mode::Faulty).unwrap());
        let finding = analyze_trace(&trace).unwrap();
        assert!(matches!(
            generate_viewpoint(&bank, &finding, &trace, &ctx()),
            Err(TeacherError::EmptyBank(ErrorClass::Miscompute))
        ));
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let mut bank = TemplateBank::default();
        bank.record_utility("prec-A", 0.25).unwrap();
        bank.save(&path).unwrap();
        assert_eq!(TemplateBank::load(&path).unwrap(), bank);
    }
}
