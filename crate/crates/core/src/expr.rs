//! Arithmetic expression domain: lexing, parsing, evaluation and task
//! generation.
//!
//! Canonical surface form is single-space-separated tokens with ASCII
//! operators, e.g. `( 4 + 6 ) * 3`. The parser additionally accepts `×` and
//! `−` and arbitrary whitespace.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::trace::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Add, Operator::Sub, Operator::Mul];

    pub fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
        }
    }

    /// Binding strength; larger binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            Operator::Add | Operator::Sub => 1,
            Operator::Mul => 2,
        }
    }

    pub fn apply(self, lhs: i64, rhs: i64) -> i64 {
        match self {
            Operator::Add => lhs.wrapping_add(rhs),
            Operator::Sub => lhs.wrapping_sub(rhs),
            Operator::Mul => lhs.wrapping_mul(rhs),
        }
    }

    /// Operator substituted by a faulty reduction: `+ -> *`, `* -> +`, `- -> +`.
    pub fn faulty_swap(self) -> Operator {
        match self {
            Operator::Add => Operator::Mul,
            Operator::Mul => Operator::Add,
            Operator::Sub => Operator::Add,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Number(i64),
    Op(Operator),
    LParen,
    RParen,
}

impl Token {
    pub fn is_paren(self) -> bool {
        matches!(self, Token::LParen | Token::RParen)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Number(n) => write!(f, "{n}"),
            Token::Op(op) => write!(f, "{op}"),
            Token::LParen => f.write_str("("),
            Token::RParen => f.write_str(")"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Literal(i64),
    BinOp {
        op: Operator,
        left: Box<Expr>,
        right: Box<Expr>,
        parenthesized: bool,
    },
}

impl Expr {
    pub fn binop(op: Operator, left: Expr, right: Expr, parenthesized: bool) -> Self {
        Expr::BinOp {
            op,
            left: Box::new(left),
            right: Box::new(right),
            parenthesized,
        }
    }

    pub fn operator_count(&self) -> usize {
        match self {
            Expr::Literal(_) => 0,
            Expr::BinOp { left, right, .. } => 1 + left.operator_count() + right.operator_count(),
        }
    }

    /// Number of nested operators on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Literal(_) => 0,
            Expr::BinOp { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn has_parens(&self) -> bool {
        match self {
            Expr::Literal(_) => false,
            Expr::BinOp {
                left,
                right,
                parenthesized,
                ..
            } => *parenthesized || left.has_parens() || right.has_parens(),
        }
    }

    fn collect_ops(&self, out: &mut Vec<Operator>) {
        if let Expr::BinOp { op, left, right, .. } = self {
            out.push(*op);
            left.collect_ops(out);
            right.collect_ops(out);
        }
    }

    /// True when the expression mixes `*` with `+` or `-`.
    pub fn has_mixed_precedence(&self) -> bool {
        let mut ops = Vec::new();
        self.collect_ops(&mut ops);
        let mul = ops.iter().any(|o| o.precedence() == 2);
        let add = ops.iter().any(|o| o.precedence() == 1);
        mul && add
    }

    /// Canonical token sequence. Explicit parentheses are emitted exactly
    /// where `parenthesized` is set.
    pub fn to_tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<Token>) {
        match self {
            Expr::Literal(v) => out.push(Token::Number(*v)),
            Expr::BinOp {
                op,
                left,
                right,
                parenthesized,
            } => {
                if *parenthesized {
                    out.push(Token::LParen);
                }
                left.push_tokens(out);
                out.push(Token::Op(*op));
                right.push_tokens(out);
                if *parenthesized {
                    out.push(Token::RParen);
                }
            }
        }
    }

    /// Compact rendering without spaces, e.g. `(4+6)*3`.
    pub fn render_compact(&self) -> String {
        self.to_tokens().iter().map(Token::to_string).collect()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rendered: Vec<String> = self.to_tokens().iter().map(Token::to_string).collect();
        f.write_str(&rendered.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced parenthesis at position {position}")]
    UnbalancedParenthesis { position: usize },
    #[error("unexpected {found} at position {position}")]
    UnexpectedToken { position: usize, found: String },
}

/// Splits text into tokens paired with their character offsets.
pub fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '0'..='9' => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let digits: String = chars[start..i].iter().collect();
                let value = digits.parse::<i64>().map_err(|_| ParseError::UnexpectedToken {
                    position: start,
                    found: format!("out-of-range literal `{digits}`"),
                })?;
                out.push((Token::Number(value), start));
                continue;
            }
            '+' => Token::Op(Operator::Add),
            '-' | '−' => Token::Op(Operator::Sub),
            '*' | '×' => Token::Op(Operator::Mul),
            '(' => Token::LParen,
            ')' => Token::RParen,
            other => {
                return Err(ParseError::UnexpectedToken {
                    position: i,
                    found: format!("character `{other}`"),
                })
            }
        };
        out.push((tok, i));
        i += 1;
    }
    Ok(out)
}

/// Parses surface text into an [`Expr`]. Error positions are character
/// offsets into `text`.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    let end = text.chars().count();
    parse_positioned(&tokens, end)
}

/// Parses a token sequence directly. Error positions are token indices.
/// Negative literals are accepted here since intermediate reduction states
/// can contain them.
pub fn parse_tokens(tokens: &[Token]) -> Result<Expr, ParseError> {
    let positioned: Vec<(Token, usize)> = tokens.iter().copied().zip(0..).collect();
    parse_positioned(&positioned, tokens.len())
}

fn parse_positioned(tokens: &[(Token, usize)], end: usize) -> Result<Expr, ParseError> {
    if tokens.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    check_balance(tokens)?;
    let mut parser = Parser { tokens, pos: 0, end };
    let expr = parser.expr()?;
    if let Some(&(tok, position)) = tokens.get(parser.pos) {
        return Err(ParseError::UnexpectedToken {
            position,
            found: format!("`{tok}`"),
        });
    }
    Ok(expr)
}

fn check_balance(tokens: &[(Token, usize)]) -> Result<(), ParseError> {
    let mut open = Vec::new();
    for &(tok, position) in tokens {
        match tok {
            Token::LParen => open.push(position),
            Token::RParen => {
                if open.pop().is_none() {
                    return Err(ParseError::UnbalancedParenthesis { position });
                }
            }
            _ => {}
        }
    }
    match open.first() {
        Some(&position) => Err(ParseError::UnbalancedParenthesis { position }),
        None => Ok(()),
    }
}

struct Parser<'a> {
    tokens: &'a [(Token, usize)],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).map(|t| t.0)
    }

    fn unexpected(&self) -> ParseError {
        match self.tokens.get(self.pos) {
            Some(&(tok, position)) => ParseError::UnexpectedToken {
                position,
                found: format!("`{tok}`"),
            },
            None => ParseError::UnexpectedToken {
                position: self.end,
                found: "end of input".into(),
            },
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ (Operator::Add | Operator::Sub))) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binop(op, lhs, rhs, false);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(Operator::Mul)) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::binop(Operator::Mul, lhs, rhs, false);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Token::Number(v)) => {
                self.pos += 1;
                Ok(Expr::Literal(v))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(Token::RParen) {
                    return Err(self.unexpected());
                }
                self.pos += 1;
                Ok(match inner {
                    Expr::BinOp { op, left, right, .. } => Expr::BinOp {
                        op,
                        left,
                        right,
                        parenthesized: true,
                    },
                    lit => lit,
                })
            }
            _ => Err(self.unexpected()),
        }
    }
}

/// Exact value under standard semantics. Arithmetic wraps on overflow, which
/// generated tasks never reach.
pub fn evaluate(e: &Expr) -> i64 {
    match e {
        Expr::Literal(v) => *v,
        Expr::BinOp { op, left, right, .. } => op.apply(evaluate(left), evaluate(right)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFeatures {
    pub has_parens: bool,
    pub has_mixed_precedence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub expression: Expr,
    pub rendered: TokenSeq,
    pub oracle_value: i64,
    pub features: TaskFeatures,
}

impl TaskSpec {
    pub fn from_expr(expression: Expr) -> Self {
        let features = TaskFeatures {
            has_parens: expression.has_parens(),
            has_mixed_precedence: expression.has_mixed_precedence(),
        };
        Self {
            rendered: TokenSeq::new(expression.to_tokens()),
            oracle_value: evaluate(&expression),
            features,
            expression,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        parse(text).map(Self::from_expr)
    }

    pub fn operator_count(&self) -> usize {
        self.expression.operator_count()
    }

    pub fn to_record(&self) -> TaskRecord {
        TaskRecord {
            expr: self.expression.to_string(),
            oracle: self.oracle_value,
            has_parens: self.features.has_parens,
            has_mixed_precedence: self.features.has_mixed_precedence,
        }
    }
}

/// Serialized task line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub expr: String,
    pub oracle: i64,
    pub has_parens: bool,
    pub has_mixed_precedence: bool,
}

#[derive(Debug, Error)]
pub enum TaskIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn write_tasks<W: Write>(mut out: W, tasks: &[TaskSpec]) -> Result<(), TaskIoError> {
    for task in tasks {
        let line = serde_json::to_string(&task.to_record()).expect("task record serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a task file, re-deriving every field from `expr` and checking the
/// stored oracle and features against it.
pub fn read_tasks<R: BufRead>(input: R) -> Result<Vec<TaskSpec>, TaskIoError> {
    let mut tasks = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| TaskIoError::Malformed {
            line: idx + 1,
            message,
        };
        let record: TaskRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let task = TaskSpec::parse(&record.expr).map_err(|e| malformed(e.to_string()))?;
        if task.to_record() != (TaskRecord { expr: task.expression.to_string(), ..record.clone() }) {
            return Err(malformed(format!("stored fields disagree with `{}`", record.expr)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_operators: usize,
    pub max_operators: usize,
    pub min_operand: i64,
    pub max_operand: i64,
    pub paren_probability: f64,
    /// Relative weights for `+`, `-`, `*`.
    pub operator_weights: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_operators: 1,
            max_operators: 4,
            min_operand: 0,
            max_operand: 9,
            paren_probability: 0.5,
            operator_weights: [1.0, 1.0, 1.0],
        }
    }
}

/// Largest supported operator count; keeps values far inside `i64`.
pub const MAX_OPERATORS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid generator config: {0}")]
pub struct InvalidConfig(pub String);

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let err = |m: &str| Err(InvalidConfig(m.to_string()));
        if self.min_operators == 0 || self.min_operators > self.max_operators {
            return err("operator count range must satisfy 1 <= min <= max");
        }
        if self.max_operators > MAX_OPERATORS {
            return err("max_operators exceeds 8");
        }
        if self.min_operand < 0 || self.min_operand > self.max_operand || self.max_operand > 99 {
            return err("operand range must satisfy 0 <= min <= max <= 99");
        }
        if !(0.0..=1.0).contains(&self.paren_probability) {
            return err("paren_probability outside [0, 1]");
        }
        if self.operator_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.operator_weights.iter().sum::<f64>() <= 0.0
        {
            return err("operator_weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

/// Draws one task. A flat operand/operator chain is sampled first; then up
/// to `n - 1` parenthesis groups are inserted, each with probability
/// `paren_probability`, over spans that nest properly with earlier groups.
/// Groups never wrap a single operand or the whole expression.
pub fn generate_task(rng: &mut RngStream, cfg: &GeneratorConfig) -> Result<TaskSpec, InvalidConfig> {
    cfg.validate()?;
    let n_ops = cfg.min_operators + rng.below(cfg.max_operators - cfg.min_operators + 1);
    let operands: Vec<i64> = (0..=n_ops)
        .map(|_| rng.range_inclusive(cfg.min_operand, cfg.max_operand))
        .collect();
    let ops: Vec<Operator> = (0..n_ops)
        .map(|_| Operator::ALL[rng.weighted_index(&cfg.operator_weights)])
        .collect();

    // Spans over operand indices, inclusive.
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for _ in 0..n_ops.saturating_sub(1) {
        if !rng.bernoulli(cfg.paren_probability) {
            continue;
        }
        let valid: Vec<(usize, usize)> = (0..=n_ops)
            .flat_map(|i| (i + 1..=n_ops).map(move |j| (i, j)))
            .filter(|&(i, j)| !(i == 0 && j == n_ops))
            .filter(|&span| groups.iter().all(|&g| nests(span, g)))
            .collect();
        if valid.is_empty() {
            break;
        }
        groups.push(valid[rng.below(valid.len())]);
    }

    let mut tokens = Vec::with_capacity(4 * n_ops + 1);
    for (k, &value) in operands.iter().enumerate() {
        let opens = groups.iter().filter(|g| g.0 == k).count();
        tokens.extend(std::iter::repeat_n(Token::LParen, opens));
        tokens.push(Token::Number(value));
        let closes = groups.iter().filter(|g| g.1 == k).count();
        tokens.extend(std::iter::repeat_n(Token::RParen, closes));
        if k < n_ops {
            tokens.push(Token::Op(ops[k]));
        }
    }
    let expression = parse_tokens(&tokens).expect("generated tokens form a valid expression");
    Ok(TaskSpec::from_expr(expression))
}

/// Distinct spans that are disjoint or strictly nested.
fn nests(a: (usize, usize), b: (usize, usize)) -> bool {
    if a == b {
        return false;
    }
    let disjoint = a.1 < b.0 || b.1 < a.0;
    let a_in_b = b.0 <= a.0 && a.1 <= b.1;
    let b_in_a = a.0 <= b.0 && b.1 <= a.1;
    disjoint || a_in_b || b_in_a
}

/// Generates `count` tasks, each from its own derived stream.
pub fn generate_tasks(
    master_seed: u64,
    stream_label: u64,
    count: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<TaskSpec>, InvalidConfig> {
    (0..count)
        .map(|i| {
            let mut rng = RngStream::derived(master_seed, &[stream_label, i as u64]);
            generate_task(&mut rng, cfg)
        })
        .collect()
}
