//! Viewpoints, the active set V and the append-only knowledge base.
//!
//! The knowledge base is persisted as JSON Lines, one viewpoint per line,
//! so it can be read and diffed as plain text:
//!
//! ```text
//! {"id":"vp-00001","error_class":"paren_violation","principle":"...","bias_spec":{"0":-4.0,"1":2.0},"trigger":"always","provenance":{...},"utility":{...},"feature_version":1}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::student::{FEATURE_DIM, FEATURE_VERSION};
use crate::trace::TokenSeq;

/// Active-set cap used when none is configured.
pub const DEFAULT_ACTIVE_CAPACITY: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewpointId(pub String);

impl fmt::Display for ViewpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ViewpointId {
    fn from(s: &str) -> Self {
        ViewpointId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    ParenViolation,
    PrecedenceViolation,
    Miscompute,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 3] = [
        ErrorClass::ParenViolation,
        ErrorClass::PrecedenceViolation,
        ErrorClass::Miscompute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::ParenViolation => "paren_violation",
            ErrorClass::PrecedenceViolation => "precedence_violation",
            ErrorClass::Miscompute => "miscompute",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// When a viewpoint's bias applies, judged on the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    #[default]
    Always,
    HasParens,
    HasMixedPrecedence,
}

impl Trigger {
    pub fn applies(self, s: &TokenSeq) -> bool {
        match self {
            Trigger::Always => true,
            Trigger::HasParens => s.has_parens(),
            Trigger::HasMixedPrecedence => s.has_mixed_precedence(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trace_id: String,
    pub episode: u64,
    pub template_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityStats {
    pub estimate: f64,
    pub std_error: f64,
    pub probes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: ViewpointId,
    pub error_class: ErrorClass,
    #[serde(rename = "principle")]
    pub principle_text: String,
    pub bias_spec: BTreeMap<usize, f64>,
    pub trigger: Trigger,
    pub provenance: Provenance,
    pub utility: Option<UtilityStats>,
}

impl Viewpoint {
    /// A viewpoint with empty provenance and no utility yet.
    pub fn new(
        id: ViewpointId,
        error_class: ErrorClass,
        principle_text: String,
        bias_spec: BTreeMap<usize, f64>,
        trigger: Trigger,
    ) -> Self {
        Self {
            id,
            error_class,
            principle_text,
            bias_spec,
            trigger,
            provenance: Provenance {
                trace_id: String::new(),
                episode: 0,
                template_id: String::new(),
            },
            utility: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.principle_text.trim().is_empty() {
            return Err(format!("viewpoint {} has an empty principle", self.id));
        }
        if let Some(k) = self.bias_spec.keys().find(|k| **k >= FEATURE_DIM) {
            return Err(format!("viewpoint {} biases feature {k} outside 0..{FEATURE_DIM}", self.id));
        }
        if self.bias_spec.values().any(|v| !v.is_finite()) {
            return Err(format!("viewpoint {} has a non-finite bias", self.id));
        }
        Ok(())
    }

    /// Same viewpoint with every bias negated.
    pub fn sign_flipped(&self, id: ViewpointId) -> Self {
        Self {
            id,
            bias_spec: self.bias_spec.iter().map(|(k, v)| (*k, -v)).collect(),
            utility: None,
            ..self.clone()
        }
    }
}

/// On-disk line layout; field order is fixed by declaration order.
#[derive(Serialize)]
struct KbLineRef<'a> {
    id: &'a ViewpointId,
    error_class: ErrorClass,
    principle: &'a str,
    bias_spec: &'a BTreeMap<usize, f64>,
    trigger: Trigger,
    provenance: &'a Provenance,
    utility: &'a Option<UtilityStats>,
    feature_version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KbLine {
    id: ViewpointId,
    error_class: ErrorClass,
    principle: String,
    bias_spec: BTreeMap<usize, f64>,
    trigger: Trigger,
    provenance: Provenance,
    utility: Option<UtilityStats>,
    #[allow(dead_code)]
    feature_version: u32,
}

#[derive(Debug, Error)]
pub enum ViewpointError {
    #[error("duplicate viewpoint id {0}")]
    DuplicateId(ViewpointId),
    #[error("unknown viewpoint id {0}")]
    UnknownId(ViewpointId),
    #[error("invalid viewpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: feature_version {found} is not supported (expected {FEATURE_VERSION})")]
    SchemaVersionMismatch { line: usize, found: u64 },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

/// Append-only store of every viewpoint ever generated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<Viewpoint>,
    index: HashMap<ViewpointId, usize>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, v: Viewpoint) -> Result<(), ViewpointError> {
        if self.index.contains_key(&v.id) {
            return Err(ViewpointError::DuplicateId(v.id));
        }
        v.validate().map_err(ViewpointError::Invalid)?;
        self.index.insert(v.id.clone(), self.entries.len());
        self.entries.push(v);
        Ok(())
    }

    pub fn get(&self, id: &ViewpointId) -> Option<&Viewpoint> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: &ViewpointId) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Viewpoint> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&Viewpoint> {
        self.entries.last()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), ViewpointError> {
        for v in &self.entries {
            let line = KbLineRef {
                id: &v.id,
                error_class: v.error_class,
                principle: &v.principle_text,
                bias_spec: &v.bias_spec,
                trigger: v.trigger,
                provenance: &v.provenance,
                utility: &v.utility,
                feature_version: FEATURE_VERSION,
            };
            let json = serde_json::to_string(&line).expect("viewpoint line serializes");
            writeln!(out, "{json}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, ViewpointError> {
        let mut kb = KnowledgeBase::new();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| ViewpointError::MalformedLine { line: line_no, message };
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            match value.get("feature_version").and_then(|v| v.as_u64()) {
                Some(v) if v == u64::from(FEATURE_VERSION) => {}
                Some(found) => return Err(ViewpointError::SchemaVersionMismatch { line: line_no, found }),
                None => return Err(malformed("missing feature_version".into())),
            }
            let parsed: KbLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            let v = Viewpoint {
                id: parsed.id,
                error_class: parsed.error_class,
                principle_text: parsed.principle,
                bias_spec: parsed.bias_spec,
                trigger: parsed.trigger,
                provenance: parsed.provenance,
                utility: parsed.utility,
            };
            kb.append(v).map_err(|e| malformed(e.to_string()))?;
        }
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<(), ViewpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ViewpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// The set V of viewpoints currently conditioning the student. Ordered by
/// activation; at capacity the oldest member is evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveViewpoints {
    members: Vec<Viewpoint>,
    capacity: usize,
}

impl Default for ActiveViewpoints {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_ACTIVE_CAPACITY)
    }
}

impl ActiveViewpoints {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            members: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    /// An evaluation-only set that is not tied to a knowledge base and
    /// ignores the capacity.
    pub fn from_viewpoints(members: Vec<Viewpoint>) -> Self {
        let capacity = members.len().max(DEFAULT_ACTIVE_CAPACITY);
        let mut out = Self::with_capacity(capacity);
        for v in members {
            if !out.contains(&v.id) {
                out.members.push(v);
            }
        }
        out
    }

    /// Activates a knowledge-base entry. Activating a member again is a
    /// no-op. Returns the evicted member, if any.
    pub fn activate(&mut self, kb: &KnowledgeBase, id: &ViewpointId) -> Result<Option<Viewpoint>, ViewpointError> {
        let v = kb.get(id).ok_or_else(|| ViewpointError::UnknownId(id.clone()))?;
        if self.contains(id) {
            return Ok(None);
        }
        let evicted = if self.members.len() >= self.capacity {
            Some(self.members.remove(0))
        } else {
            None
        };
        self.members.push(v.clone());
        Ok(evicted)
    }

    pub fn deactivate(&mut self, id: &ViewpointId) -> Result<Viewpoint, ViewpointError> {
        let pos = self
            .members
            .iter()
            .position(|v| &v.id == id)
            .ok_or_else(|| ViewpointError::UnknownId(id.clone()))?;
        Ok(self.members.remove(pos))
    }

    pub fn reset(&mut self) {
        self.members.clear();
    }

    /// `V ∪ {v}` for evaluation.
    pub fn with(&self, v: &Viewpoint) -> ActiveViewpoints {
        let mut out = self.clone();
        if !out.contains(&v.id) {
            out.members.push(v.clone());
            out.capacity = out.capacity.max(out.members.len());
        }
        out
    }

    pub fn contains(&self, id: &ViewpointId) -> bool {
        self.members.iter().any(|v| &v.id == id)
    }

    pub fn ids(&self) -> Vec<ViewpointId> {
        self.members.iter().map(|v| v.id.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Viewpoint> {
        self.members.iter()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
