//! Wire grammar for policy responses.
//!
//! A response is free text (the thought) optionally carrying either a fenced
//! block of drawing-operation records or a final-answer line:
//!
//! ````text
//! The chair is left of the table; mark both.
//! ```draw
//! box k=1 p=(10, 12, 80, 96) l="chair"
//! line k=2 p=[(40, 50), (120, 50)] l="chair to table"
//! ```
//! ````
//!
//! ```text
//! The path ends at B.
//! Final answer: B
//! ```
//!
//! Fence lines are matched after trimming: an opening line is exactly
//! ```` ```draw ````, a closing line exactly ```` ``` ````. Several blocks may
//! appear; their records are concatenated in order. Blank lines inside a block
//! are ignored. Record syntax:
//!
//! ```text
//! record  := kind WS "k=" UINT WS "p=" coords WS "l=" STRING
//! kind    := "box" | "line"
//! coords  := "(" num "," num "," num "," num ")"                       -- box: x1, y1, x2, y2
//!          | "[" point ("," point)+ "]"    point := "(" num "," num ")"  -- line
//! num     := [+-]? (digits ("." digits?)? | "." digits) ([eE] [+-]? digits)?
//! STRING  := '"' ( any char but '"', '\' or newline | '\"' | '\\' | '\n' | '\r' | '\t' )* '"'
//! ```
//!
//! `WS` is zero or more spaces or tabs, also allowed between any other two
//! tokens; the kind keyword ends at the first non-letter. `k` is 1-based and the
//! label must be non-empty after normalization. The answer marker is a line
//! starting (case-insensitively, after leading whitespace) with
//! `Final answer:` or `Answer:`; the rest of that line is the answer. Only the
//! first marker counts; later ones are ordinary thought text. Everything that
//! is neither a block nor the answer line is thought.

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{BBox, Point, Polyline};

pub const OPEN_FENCE: &str = "```draw";
pub const CLOSE_FENCE: &str = "```";
pub const ANSWER_MARKER: &str = "Final answer:";
const MARKERS: [&str; 2] = ["final answer:", "answer:"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("response carries both drawing operations and a final answer")]
    Ambiguous,
    #[error("no extractable answer in {0:?}")]
    UnparseableAnswer(String),
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
}

/// Trim, collapse internal whitespace runs to one space, lowercase.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Box,
    Line,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Box => "box",
            OpKind::Line => "line",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Box(BBox),
    Line(Polyline),
}

/// One drawing call: target image `k` (1-based), coordinates, semantic label.
///
/// `PartialEq` is structural (raw label text). Duplicate and reflection
/// checks use [`DrawOperation::canonical`] instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OpRecord", into = "OpRecord")]
pub struct DrawOperation {
    pub k: usize,
    pub geometry: Geometry,
    pub label: String,
}

/// Hashable identity of an operation: kind, index, exact coordinate bits,
/// normalized label. `-0.0` and `0.0` compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalOp {
    pub kind: OpKind,
    pub k: usize,
    pub coords: Vec<u64>,
    pub label: String,
}

fn coord_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

impl DrawOperation {
    pub fn bbox(k: usize, bbox: BBox, label: impl Into<String>) -> Self {
        Self {
            k,
            geometry: Geometry::Box(bbox),
            label: label.into(),
        }
    }

    pub fn line(k: usize, points: Vec<Point>, label: impl Into<String>) -> Self {
        Self {
            k,
            geometry: Geometry::Line(Polyline::new(points)),
            label: label.into(),
        }
    }

    pub fn kind(&self) -> OpKind {
        match self.geometry {
            Geometry::Box(_) => OpKind::Box,
            Geometry::Line(_) => OpKind::Line,
        }
    }

    pub fn normalized_label(&self) -> String {
        normalize_label(&self.label)
    }

    pub fn coords(&self) -> Vec<f64> {
        match &self.geometry {
            Geometry::Box(b) => b.coords().to_vec(),
            Geometry::Line(l) => l.points.iter().flat_map(|p| [p.x, p.y]).collect(),
        }
    }

    pub fn canonical(&self) -> CanonicalOp {
        CanonicalOp {
            kind: self.kind(),
            k: self.k,
            coords: self.coords().into_iter().map(coord_bits).collect(),
            label: self.normalized_label(),
        }
    }

    pub fn canonically_eq(&self, other: &DrawOperation) -> bool {
        self.canonical() == other.canonical()
    }

    /// Structural checks every parsed operation satisfies.
    pub fn validate(&self) -> Result<(), DslError> {
        let bad = |m: String| Err(DslError::InvalidOperation(m));
        if self.k == 0 {
            return bad("image index k must be >= 1".into());
        }
        if self.normalized_label().is_empty() {
            return bad("label is empty".into());
        }
        if let Geometry::Line(l) = &self.geometry {
            if l.points.len() < 2 {
                return bad(format!("line has {} point(s)", l.points.len()));
            }
        }
        if !self.coords().iter().all(|c| c.is_finite()) {
            return bad("non-finite coordinate".into());
        }
        Ok(())
    }

    /// Text form of one record, as it appears inside a draw block.
    pub fn to_record(&self) -> String {
        let mut s = format!("{} k={} p=", self.kind().as_str(), self.k);
        match &self.geometry {
            Geometry::Box(b) => {
                let _ = write!(s, "({}, {}, {}, {})", b.x1, b.y1, b.x2, b.y2);
            }
            Geometry::Line(l) => {
                s.push('[');
                for (i, p) in l.points.iter().enumerate() {
                    if i > 0 {
                        s.push_str(", ");
                    }
                    let _ = write!(s, "({}, {})", p.x, p.y);
                }
                s.push(']');
            }
        }
        s.push_str(" l=");
        s.push_str(&quote(&self.label));
        s
    }
}

/// JSON shape of an operation: `{"kind", "k", "p", "l"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OpRecord {
    kind: OpKind,
    k: usize,
    p: Coords,
    l: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Coords {
    Box([f64; 4]),
    Line(Vec<[f64; 2]>),
}

impl TryFrom<OpRecord> for DrawOperation {
    type Error = DslError;

    fn try_from(r: OpRecord) -> Result<Self, Self::Error> {
        let geometry = match (r.kind, r.p) {
            (OpKind::Box, Coords::Box([x1, y1, x2, y2])) => Geometry::Box(BBox::new(x1, y1, x2, y2)),
            (OpKind::Line, Coords::Line(pts)) => Geometry::Line(Polyline::new(
                pts.into_iter().map(|[x, y]| Point::new(x, y)).collect(),
            )),
            (kind, _) => {
                return Err(DslError::InvalidOperation(format!(
                    "coordinates do not match kind {}",
                    kind.as_str()
                )))
            }
        };
        let op = DrawOperation {
            k: r.k,
            geometry,
            label: r.l,
        };
        op.validate()?;
        Ok(op)
    }
}

impl From<DrawOperation> for OpRecord {
    fn from(op: DrawOperation) -> Self {
        let kind = op.kind();
        let p = match op.geometry {
            Geometry::Box(b) => Coords::Box(b.coords()),
            Geometry::Line(l) => Coords::Line(l.points.iter().map(|p| [p.x, p.y]).collect()),
        };
        OpRecord {
            kind,
            k: op.k,
            p,
            l: op.label,
        }
    }
}

/// One policy turn: thought, operations, optional final answer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub thought: String,
    pub ops: Vec<DrawOperation>,
    pub final_answer: Option<String>,
}

impl PolicyResponse {
    pub fn thinking(thought: impl Into<String>, ops: Vec<DrawOperation>) -> Self {
        Self {
            thought: thought.into(),
            ops,
            final_answer: None,
        }
    }

    pub fn answer(thought: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            thought: thought.into(),
            ops: Vec::new(),
            final_answer: Some(answer.into()),
        }
    }
}

/// Result of a lenient parse: everything that could be read plus every
/// problem encountered, in source order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedResponse {
    pub response: PolicyResponse,
    pub errors: Vec<DslError>,
}

fn answer_rest(line: &str) -> Option<&str> {
    let t = line.trim_start();
    MARKERS.iter().find_map(|m| {
        let head = t.get(..m.len())?;
        head.eq_ignore_ascii_case(m).then(|| &t[m.len()..])
    })
}

/// Parses what it can; malformed records are reported in `errors` and left
/// out of `ops`.
pub fn parse_response_lenient(text: &str) -> ParsedResponse {
    let mut thought: Vec<&str> = Vec::new();
    let mut ops = Vec::new();
    let mut errors = Vec::new();
    let mut answer: Option<String> = None;
    let mut open_at: Option<usize> = None;

    for (i, line) in text.split('\n').enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if open_at.is_some() {
            if trimmed == CLOSE_FENCE {
                open_at = None;
            } else if !trimmed.is_empty() {
                match parse_record(line, lineno) {
                    Ok(op) => ops.push(op),
                    Err(e) => errors.push(e),
                }
            }
        } else if trimmed == OPEN_FENCE {
            open_at = Some(lineno);
        } else if answer.is_none() && answer_rest(line).is_some() {
            let rest = answer_rest(line).unwrap_or_default().trim();
            if rest.is_empty() {
                errors.push(DslError::Malformed {
                    line: lineno,
                    column: 1,
                    message: "empty final answer".into(),
                });
            } else {
                answer = Some(rest.to_string());
            }
        } else {
            thought.push(line);
        }
    }
    if let Some(line) = open_at {
        errors.push(DslError::Malformed {
            line,
            column: 1,
            message: "unclosed draw block".into(),
        });
    }
    ParsedResponse {
        response: PolicyResponse {
            thought: thought.join("\n").trim().to_string(),
            ops,
            final_answer: answer,
        },
        errors,
    }
}

/// Strict parse: any malformed record, unclosed block, or a response with
/// both operations and an answer is an error.
pub fn parse_response(text: &str) -> Result<PolicyResponse, DslError> {
    let parsed = parse_response_lenient(text);
    if let Some(e) = parsed.errors.into_iter().next() {
        return Err(e);
    }
    if !parsed.response.ops.is_empty() && parsed.response.final_answer.is_some() {
        return Err(DslError::Ambiguous);
    }
    Ok(parsed.response)
}

/// Canonical text form. `parse_response(&serialize_response(r)) == Ok(r)` for
/// every response whose thought is trimmed and contains no fence or answer
/// marker lines, and whose answer is a single trimmed line.
pub fn serialize_response(resp: &PolicyResponse) -> String {
    let mut out = resp.thought.clone();
    if !resp.ops.is_empty() {
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(OPEN_FENCE);
        out.push('\n');
        for op in &resp.ops {
            out.push_str(&op.to_record());
            out.push('\n');
        }
        out.push_str(CLOSE_FENCE);
    }
    if let Some(a) = &resp.final_answer {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(ANSWER_MARKER);
        out.push(' ');
        out.push_str(a);
    }
    out
}

fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\r' => q.push_str("\\r"),
            '\t' => q.push_str("\\t"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

struct Cursor {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl Cursor {
    fn new(src: &str, line: usize) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            line,
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, DslError> {
        Err(DslError::Malformed {
            line: self.line,
            column: self.pos + 1,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(' ' | '\t' | '\r')) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), DslError> {
        self.skip_ws();
        for want in token.chars() {
            if self.peek() != Some(want) {
                return self.err(format!("expected `{token}`"));
            }
            self.pos += 1;
        }
        Ok(())
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn uint(&mut self) -> Result<usize, DslError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected an image index");
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        match s.parse::<usize>() {
            Ok(0) => {
                self.pos = start;
                self.err("image index must be >= 1")
            }
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err("image index out of range")
            }
        }
    }

    fn number(&mut self) -> Result<f64, DslError> {
        self.skip_ws();
        let start = self.pos;
        if matches!(self.peek(), Some('+' | '-')) {
            self.pos += 1;
        }
        let int_digits = self.digits();
        let mut frac_digits = 0;
        if self.peek() == Some('.') {
            self.pos += 1;
            frac_digits = self.digits();
        }
        if int_digits == 0 && frac_digits == 0 {
            self.pos = start;
            return self.err("expected a number");
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some('+' | '-')) {
                self.pos += 1;
            }
            if self.digits() == 0 {
                self.pos = mark;
                return self.err("malformed exponent");
            }
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos = start;
                self.err(format!("number {s} is not finite"))
            }
        }
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.pos - start
    }

    fn point(&mut self) -> Result<Point, DslError> {
        self.expect("(")?;
        let x = self.number()?;
        self.expect(",")?;
        let y = self.number()?;
        self.expect(")")?;
        Ok(Point::new(x, y))
    }

    fn string(&mut self) -> Result<String, DslError> {
        self.expect("\"")?;
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return self.err("unterminated label string"),
                Some('"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some('\\') => {
                    self.pos += 1;
                    let c = match self.peek() {
                        Some('"') => '"',
                        Some('\\') => '\\',
                        Some('n') => '\n',
                        Some('r') => '\r',
                        Some('t') => '\t',
                        _ => return self.err("unknown escape"),
                    };
                    out.push(c);
                    self.pos += 1;
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }
}

fn parse_record(src: &str, line: usize) -> Result<DrawOperation, DslError> {
    let mut cur = Cursor::new(src, line);
    let kind_start = {
        cur.skip_ws();
        cur.pos
    };
    let kind = match cur.word().as_str() {
        "box" => OpKind::Box,
        "line" => OpKind::Line,
        other => {
            cur.pos = kind_start;
            return cur.err(format!("unknown operation kind `{other}`"));
        }
    };
    cur.expect("k")?;
    cur.expect("=")?;
    let k = cur.uint()?;
    cur.expect("p")?;
    cur.expect("=")?;
    let geometry = match kind {
        OpKind::Box => {
            cur.expect("(")?;
            let mut c = [0.0; 4];
            for (i, slot) in c.iter_mut().enumerate() {
                if i > 0 {
                    cur.expect(",")?;
                }
                *slot = cur.number()?;
            }
            cur.expect(")")?;
            Geometry::Box(BBox::new(c[0], c[1], c[2], c[3]))
        }
        OpKind::Line => {
            cur.expect("[")?;
            let mut pts = vec![cur.point()?];
            loop {
                cur.skip_ws();
                match cur.peek() {
                    Some(',') => {
                        cur.pos += 1;
                        pts.push(cur.point()?);
                    }
                    Some(']') => {
                        cur.pos += 1;
                        break;
                    }
                    _ => return cur.err("expected `,` or `]`"),
                }
            }
            if pts.len() < 2 {
                return cur.err("a line needs at least 2 points");
            }
            Geometry::Line(Polyline::new(pts))
        }
    };
    cur.expect("l")?;
    cur.expect("=")?;
    let label_at = {
        cur.skip_ws();
        cur.pos
    };
    let label = cur.string()?;
    if normalize_label(&label).is_empty() {
        cur.pos = label_at;
        return cur.err("label is empty");
    }
    cur.skip_ws();
    if cur.peek().is_some() {
        return cur.err("trailing characters after record");
    }
    Ok(DrawOperation { k, geometry, label })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Choice,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Choice(char),
    Numeric(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub raw: String,
    pub value: AnswerValue,
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap());

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Pulls the option letter or number out of free answer text. First match
/// wins: "between A and B" yields `A`.
///
/// For choices a bare letter (any case, optionally wrapped in punctuation such
/// as `(b)` or `c.`) is taken first; otherwise the first uppercase letter that
/// stands alone as a word.
pub fn extract_answer(text: &str, qtype: QuestionType) -> Result<FinalAnswer, DslError> {
    let raw = text.trim().to_string();
    let value = match qtype {
        QuestionType::Choice => {
            let core: Vec<char> = raw
                .trim_matches(|c: char| !is_word(c))
                .chars()
                .collect();
            let letter = if core.len() == 1 && core[0].is_ascii_alphabetic() {
                Some(core[0].to_ascii_uppercase())
            } else {
                let chars: Vec<char> = raw.chars().collect();
                (0..chars.len()).find_map(|i| {
                    let c = chars[i];
                    let before = i == 0 || !is_word(chars[i - 1]);
                    let after = i + 1 == chars.len() || !is_word(chars[i + 1]);
                    (c.is_ascii_uppercase() && before && after).then_some(c)
                })
            };
            letter.map(AnswerValue::Choice)
        }
        QuestionType::Numeric => NUMBER
            .find_iter(&raw)
            .filter_map(|m| m.as_str().parse::<f64>().ok())
            .find(|v| v.is_finite())
            .map(AnswerValue::Numeric),
    };
    value
        .map(|value| FinalAnswer {
            raw: raw.clone(),
            value,
        })
        .ok_or(DslError::UnparseableAnswer(raw))
}
