//! Step-level reduction engine.
//!
//! A state is a [`TokenSeq`]. An action reduces one `Number Operator Number`
//! triple (a [`Redex`]) to a single number, either exactly or with the
//! operator swapped. A rollout repeats this until one number remains and
//! records the whole interaction as a [`Trace`].
//!
//! Redex flags:
//! - `crosses_paren`: a parenthesis token lies strictly inside the span.
//! - `innermost_paren`: the redex does not cross and sits directly inside a
//!   parenthesis group that contains no other parentheses.
//! - `max_precedence`: the redex has the highest priority among all current
//!   redexes, where priority orders first by parenthesis depth of the operator
//!   and then by operator precedence.
//! - `leftmost`: the redex is the first of the `max_precedence` redexes.
//!
//! The redex that is both `max_precedence` and `leftmost` is always a correct
//! next step under standard evaluation order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_tokens, Operator, TaskSpec, Token};
use crate::rng::RngStream;
use crate::student::{self, StudentPolicy};
use crate::viewpoint::{ActiveViewpoints, ViewpointId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("state `{0}` is terminal")]
    TerminalState(String),
    #[error("action is not a candidate in state `{0}`")]
    IllegalAction(String),
    #[error("malformed token sequence: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.tokens.len() == 1 && matches!(self.tokens[0], Token::Number(_))
    }

    pub fn terminal_value(&self) -> Option<i64> {
        match self.tokens.as_slice() {
            [Token::Number(v)] => Some(*v),
            _ => None,
        }
    }

    pub fn operator_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, Token::Op(_))).count()
    }

    pub fn has_parens(&self) -> bool {
        self.tokens.iter().any(|t| t.is_paren())
    }

    pub fn has_mixed_precedence(&self) -> bool {
        let prec = |p| {
            self.tokens
                .iter()
                .any(|t| matches!(t, Token::Op(op) if op.precedence() == p))
        };
        prec(1) && prec(2)
    }

    pub fn is_balanced(&self) -> bool {
        let mut depth = 0i64;
        for t in &self.tokens {
            match t {
                Token::LParen => depth += 1,
                Token::RParen => {
                    depth -= 1;
                    if depth < 0 {
                        return false;
                    }
                }
                _ => {}
            }
        }
        depth == 0
    }

    /// Exact value of the state read as an expression.
    pub fn evaluate(&self) -> Result<i64, TraceError> {
        parse_tokens(&self.tokens)
            .map(|e| crate::expr::evaluate(&e))
            .map_err(|e| TraceError::Malformed(e.to_string()))
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Parses the canonical space-separated form. A piece like `-7` is a
/// negative literal; a lone `-` is subtraction.
impl FromStr for TokenSeq {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = s
            .split_whitespace()
            .map(|piece| match piece {
                "(" => Ok(Token::LParen),
                ")" => Ok(Token::RParen),
                "+" => Ok(Token::Op(Operator::Add)),
                "-" => Ok(Token::Op(Operator::Sub)),
                "*" => Ok(Token::Op(Operator::Mul)),
                other => other
                    .parse::<i64>()
                    .map(Token::Number)
                    .map_err(|_| TraceError::Malformed(format!("bad token `{other}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { tokens })
    }
}

impl Serialize for TokenSeq {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenSeq {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Redex {
    pub left_idx: usize,
    pub op_idx: usize,
    pub right_idx: usize,
    pub operator: Operator,
    pub crosses_paren: bool,
    pub innermost_paren: bool,
    pub max_precedence: bool,
    pub leftmost: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    Faulty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub redex: Redex,
    pub mode: Mode,
}

impl Action {
    /// Value this action writes for the given operands.
    pub fn compute(&self, lhs: i64, rhs: i64) -> i64 {
        match self.mode {
            Mode::Exact => self.redex.operator.apply(lhs, rhs),
            Mode::Faulty => self.redex.operator.faulty_swap().apply(lhs, rhs),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.redex;
        write!(
            f,
            "[{},{},{}] {} {:?}",
            r.left_idx, r.op_idx, r.right_idx, r.operator, self.mode
        )
    }
}

/// Parenthesis depth at every token position (an opening paren counts
/// towards the tokens after it, not itself).
fn depths(tokens: &[Token]) -> Vec<usize> {
    let mut d = 0usize;
    tokens
        .iter()
        .map(|t| match t {
            Token::LParen => {
                d += 1;
                d - 1
            }
            Token::RParen => {
                d = d.saturating_sub(1);
                d
            }
            _ => d,
        })
        .collect()
}

/// Index of the partner of every parenthesis token.
fn paren_partners(tokens: &[Token]) -> Vec<Option<usize>> {
    let mut partner = vec![None; tokens.len()];
    let mut open = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        match t {
            Token::LParen => open.push(i),
            Token::RParen => {
                if let Some(o) = open.pop() {
                    partner[o] = Some(i);
                    partner[i] = Some(o);
                }
            }
            _ => {}
        }
    }
    partner
}

/// Ordering key for redex priority: parenthesis depth, then precedence.
pub fn redex_priority(tokens: &[Token], redex: &Redex) -> (usize, u8) {
    (depths(tokens)[redex.op_idx], redex.operator.precedence())
}

/// All redexes in left-to-right operator order.
pub fn redexes(s: &TokenSeq) -> Vec<Redex> {
    let tokens = s.tokens();
    let depth = depths(tokens);
    let partner = paren_partners(tokens);
    let mut out = Vec::new();

    for (op_idx, tok) in tokens.iter().enumerate() {
        let Token::Op(operator) = *tok else { continue };
        let left = (0..op_idx)
            .rev()
            .find(|&i| !tokens[i].is_paren())
            .filter(|&i| matches!(tokens[i], Token::Number(_)));
        let right = (op_idx + 1..tokens.len())
            .find(|&i| !tokens[i].is_paren())
            .filter(|&i| matches!(tokens[i], Token::Number(_)));
        let (Some(left_idx), Some(right_idx)) = (left, right) else {
            continue;
        };
        let crosses_paren = tokens[left_idx + 1..right_idx].iter().any(|t| t.is_paren());
        let innermost_paren = !crosses_paren && {
            // Innermost enclosing group: nearest unmatched '(' to the left.
            let mut level = 0i64;
            let mut open = None;
            for i in (0..left_idx).rev() {
                match tokens[i] {
                    Token::RParen => level += 1,
                    Token::LParen if level == 0 => {
                        open = Some(i);
                        break;
                    }
                    Token::LParen => level -= 1,
                    _ => {}
                }
            }
            match open.and_then(|o| partner[o].map(|c| (o, c))) {
                Some((o, c)) => !tokens[o + 1..c].iter().any(|t| t.is_paren()),
                None => false,
            }
        };
        out.push(Redex {
            left_idx,
            op_idx,
            right_idx,
            operator,
            crosses_paren,
            innermost_paren,
            max_precedence: false,
            leftmost: false,
        });
    }

    let key = |r: &Redex| (depth[r.op_idx], r.operator.precedence());
    if let Some(best) = out.iter().map(key).max() {
        let mut first = true;
        for r in out.iter_mut() {
            if key(r) == best {
                r.max_precedence = true;
                r.leftmost = first;
                first = false;
            }
        }
    }
    out
}

/// Every redex in both modes: for each redex left to right, `Exact` then
/// `Faulty`.
pub fn candidate_actions(s: &TokenSeq) -> Result<Vec<Action>, TraceError> {
    if s.is_terminal() {
        return Err(TraceError::TerminalState(s.to_string()));
    }
    let actions: Vec<Action> = redexes(s)
        .into_iter()
        .flat_map(|redex| {
            [Mode::Exact, Mode::Faulty]
                .into_iter()
                .map(move |mode| Action { redex, mode })
        })
        .collect();
    if actions.is_empty() {
        return Err(TraceError::Malformed(s.to_string()));
    }
    Ok(actions)
}

/// Applies `a` to `s`, returning the successor state and the value written.
pub fn apply(s: &TokenSeq, a: &Action) -> Result<(TokenSeq, i64), TraceError> {
    if !candidate_actions(s)?.contains(a) {
        return Err(TraceError::IllegalAction(s.to_string()));
    }
    Ok(apply_unchecked(s, a))
}

pub(crate) fn apply_unchecked(s: &TokenSeq, a: &Action) -> (TokenSeq, i64) {
    let tokens = s.tokens();
    let r = &a.redex;
    let (Token::Number(lhs), Token::Number(rhs)) = (tokens[r.left_idx], tokens[r.right_idx]) else {
        unreachable!("redex endpoints are numbers");
    };
    let value = a.compute(lhs, rhs);

    let partner = paren_partners(tokens);
    let mut removed: BTreeSet<usize> = (r.left_idx..=r.right_idx).collect();
    for i in r.left_idx + 1..r.right_idx {
        if let Some(p) = partner[i] {
            removed.insert(p);
        }
    }
    let mut next = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        if i == r.left_idx {
            next.push(Token::Number(value));
        } else if !removed.contains(&i) {
            next.push(*t);
        }
    }
    collapse_singletons(&mut next);
    (TokenSeq::new(next), value)
}

/// Rewrites `( n )` to `n` until no such group remains.
fn collapse_singletons(tokens: &mut Vec<Token>) {
    let mut i = 0;
    while i + 2 < tokens.len() {
        if let [Token::LParen, Token::Number(_), Token::RParen] = tokens[i..i + 3] {
            tokens.remove(i + 2);
            tokens.remove(i);
            i = i.saturating_sub(1);
        } else {
            i += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state_before: TokenSeq,
    pub action: Action,
    pub computed_value: i64,
    pub state_after: TokenSeq,
    pub candidates: Vec<Action>,
    pub action_log_prob: f64,
}

impl Step {
    /// Position of the chosen action within `candidates`.
    pub fn action_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|c| c == &self.action)
            .expect("chosen action is a candidate")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub task: TaskSpec,
    pub steps: Vec<Step>,
    /// `None` when the rollout stopped before reaching a single number.
    pub final_value: Option<i64>,
    pub reward: u8,
    pub active_viewpoint_ids: Vec<ViewpointId>,
    pub rng_seed: u64,
}

impl Trace {
    /// Sum of per-step action log-probabilities.
    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.action_log_prob).sum()
    }

    pub fn succeeded(&self) -> bool {
        self.reward == 1
    }

    pub fn to_record(&self) -> TraceRecord {
        TraceRecord {
            task: self.task.expression.to_string(),
            oracle: self.task.oracle_value,
            steps: self
                .steps
                .iter()
                .map(|s| StepRecord {
                    state: s.state_before.clone(),
                    action: s.action,
                    value: s.computed_value,
                    next: s.state_after.clone(),
                    candidates: s.candidates.len(),
                    log_prob: s.action_log_prob,
                })
                .collect(),
            final_value: self.final_value,
            reward: self.reward,
            active_viewpoints: self.active_viewpoint_ids.clone(),
            seed: self.rng_seed,
        }
    }
}

/// JSON form of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task: String,
    pub oracle: i64,
    pub steps: Vec<StepRecord>,
    pub final_value: Option<i64>,
    pub reward: u8,
    pub active_viewpoints: Vec<ViewpointId>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: TokenSeq,
    pub action: Action,
    pub value: i64,
    pub next: TokenSeq,
    pub candidates: usize,
    pub log_prob: f64,
}

/// Runs a task to completion with an arbitrary action chooser. The chooser
/// returns the index of the chosen candidate and its log-probability.
pub fn rollout_with<F>(task: &TaskSpec, viewpoint_ids: Vec<ViewpointId>, rng_seed: u64, mut choose: F) -> Trace
where
    F: FnMut(&TokenSeq, &[Action]) -> (usize, f64),
{
    let mut state = task.rendered.clone();
    let mut steps = Vec::with_capacity(task.operator_count());
    while !state.is_terminal() {
        let candidates = candidate_actions(&state).expect("non-terminal states have candidates");
        let (idx, log_prob) = choose(&state, &candidates);
        let action = candidates[idx];
        let (next, value) = apply_unchecked(&state, &action);
        steps.push(Step {
            state_before: state,
            action,
            computed_value: value,
            state_after: next.clone(),
            candidates,
            action_log_prob: log_prob,
        });
        state = next;
    }
    let final_value = state.terminal_value();
    let reward = u8::from(final_value == Some(task.oracle_value));
    Trace {
        task: task.clone(),
        steps,
        final_value,
        reward,
        active_viewpoint_ids: viewpoint_ids,
        rng_seed,
    }
}

/// Samples a full trace from the policy conditioned on `active`.
pub fn rollout(task: &TaskSpec, policy: &StudentPolicy, active: &ActiveViewpoints, rng: &mut RngStream) -> Trace {
    let seed = rng.seed();
    rollout_with(task, active.ids(), seed, |state, candidates| {
        let dist = student::distribution_for(policy, state, candidates, active);
        let idx = dist.sample_index(rng);
        (idx, dist.log_probs[idx])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TokenSeq {
        s.parse().unwrap()
    }

    fn find(actions: &[Action], op_idx: usize, mode: Mode) -> Action {
        *actions
            .iter()
            .find(|a| a.redex.op_idx == op_idx && a.mode == mode)
            .unwrap()
    }

    #[test]
    fn candidates_for_canonical_example() {
        let s = seq("( 4 + 6 ) * 3");
        let actions = candidate_actions(&s).unwrap();
        assert_eq!(actions.len(), 4);
        let add = actions[0].redex;
        assert_eq!((add.left_idx, add.op_idx, add.right_idx), (1, 2, 3));
        assert!(!add.crosses_paren && add.innermost_paren && add.max_precedence && add.leftmost);
        let mul = actions[2].redex;
        assert_eq!((mul.left_idx, mul.op_idx, mul.right_idx), (3, 5, 6));
        assert!(mul.crosses_paren && !mul.innermost_paren && !mul.max_precedence && !mul.leftmost);
        assert_eq!(actions[0].mode, Mode::Exact);
        assert_eq!(actions[1].mode, Mode::Faulty);
    }

    #[test]
    fn single_redex_and_terminal() {
        assert_eq!(candidate_actions(&seq("2 + 3")).unwrap().len(), 2);
        assert!(matches!(candidate_actions(&seq("30")), Err(TraceError::TerminalState(_))));
    }

    #[test]
    fn crossing_reduction_drops_matching_parens() {
        let s = seq("( 4 + 6 ) * 3");
        let actions = candidate_actions(&s).unwrap();
        let (next, v) = apply(&s, &find(&actions, 5, Mode::Exact)).unwrap();
        assert_eq!(next.to_string(), "4 + 18");
        assert_eq!(v, 18);
        let (next, v) = apply(&s, &find(&actions, 2, Mode::Exact)).unwrap();
        assert_eq!(next.to_string(), "10 * 3");
        assert_eq!(v, 10);
    }

    #[test]
    fn faulty_mode_swaps_operator() {
        let s = seq("2 + 3");
        let a = find(&candidate_actions(&s).unwrap(), 1, Mode::Faulty);
        assert_eq!(apply(&s, &a).unwrap().0.to_string(), "6");
        let s = seq("7 - 2");
        let a = find(&candidate_actions(&s).unwrap(), 1, Mode::Faulty);
        assert_eq!(apply(&s, &a).unwrap().1, 9);
        let s = seq("7 * 2");
        let a = find(&candidate_actions(&s).unwrap(), 1, Mode::Faulty);
        assert_eq!(apply(&s, &a).unwrap().1, 9);
    }

    #[test]
    fn illegal_action_rejected() {
        let s = seq("2 + 3");
        let mut a = candidate_actions(&s).unwrap()[0];
        a.redex.op_idx = 0;
        assert!(matches!(apply(&s, &a), Err(TraceError::IllegalAction(_))));
    }

    #[test]
    fn crossing_both_sides_keeps_balance() {
        let s = seq("( 1 + 2 ) * ( 3 + 4 )");
        let actions = candidate_actions(&s).unwrap();
        let (next, v) = apply(&s, &find(&actions, 5, Mode::Exact)).unwrap();
        assert_eq!(v, 6);
        assert_eq!(next.to_string(), "1 + 6 + 4");
        assert!(next.is_balanced());
    }

    #[test]
    fn nested_groups_collapse() {
        let s = seq("2 * ( ( 1 + 2 ) * 3 )");
        let actions = candidate_actions(&s).unwrap();
        let inner = find(&actions, 5, Mode::Exact);
        assert!(inner.redex.innermost_paren && inner.redex.max_precedence);
        let (next, _) = apply(&s, &inner).unwrap();
        assert_eq!(next.to_string(), "2 * ( 3 * 3 )");
        let actions = candidate_actions(&next).unwrap();
        let (next, _) = apply(&next, &find(&actions, 4, Mode::Exact)).unwrap();
        assert_eq!(next.to_string(), "2 * 9");
    }

    #[test]
    fn precedence_flags() {
        let s = seq("1 + 2 * 3 - 4 * 5");
        let rs = redexes(&s);
        let flags: Vec<(bool, bool)> = rs.iter().map(|r| (r.max_precedence, r.leftmost)).collect();
        assert_eq!(flags, vec![(false, false), (true, true), (false, false), (true, false)]);
        let rs = redexes(&seq("5 - 2 - 3"));
        assert!(rs[0].leftmost && rs[0].max_precedence);
        assert!(!rs[1].leftmost && rs[1].max_precedence);
    }

    #[test]
    fn innermost_requires_group_without_nested_parens() {
        let rs = redexes(&seq("( 1 + ( 2 + 3 ) ) * 4"));
        // (1 + 2) crosses; (2 + 3) is innermost; the outer `*` crosses.
        assert!(rs[0].crosses_paren && !rs[0].innermost_paren);
        assert!(rs[1].innermost_paren);
        assert!(rs[2].crosses_paren);
        let rs = redexes(&seq("1 + 2"));
        assert!(!rs[0].innermost_paren);
    }

    #[test]
    fn token_seq_text_round_trip() {
        for text in ["( 4 + 6 ) * 3", "5 - -1", "-3 * ( 2 + 2 )"] {
            assert_eq!(seq(text).to_string(), text);
        }
        assert_eq!(seq("5 - -1").evaluate().unwrap(), 6);
    }

    #[test]
    fn forced_rollouts_on_canonical_task() {
        let task = TaskSpec::parse("(4+6)*3").unwrap();
        let legal = rollout_with(&task, vec![], 0, |_, c| {
            (c.iter().position(|a| a.mode == Mode::Exact && a.redex.leftmost).unwrap(), 0.0)
        });
        assert_eq!(legal.final_value, Some(30));
        assert_eq!(legal.reward, 1);

        let crossing = rollout_with(&task, vec![], 0, |_, c| {
            let idx = c
                .iter()
                .position(|a| a.mode == Mode::Exact && a.redex.crosses_paren)
                .unwrap_or(0);
            (idx, 0.0)
        });
        let states: Vec<String> = crossing.steps.iter().map(|s| s.state_after.to_string()).collect();
        assert_eq!(states, vec!["4 + 18", "22"]);
        assert_eq!(crossing.reward, 0);
    }

    #[test]
    fn trace_record_round_trips_through_json() {
        let task = TaskSpec::parse("(4+6)*3").unwrap();
        let trace = rollout_with(&task, vec![], 9, |_, _| (0, -0.5));
        let json = serde_json::to_string(&trace.to_record()).unwrap();
        let back: TraceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, trace.to_record());
    }
}
