//! Reflection and duplicate detection over recorded operations, plus the
//! trace filters used to build supervised data.
//!
//! Reflection: two operations share a normalized label but differ as
//! canonical tuples (the policy went back and re-drew the same thing
//! differently). Duplication: two operations are canonically equal. A pair can
//! never be both.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dsl::{AnswerValue, DrawOperation};
use crate::episode::EpisodeTrace;
use crate::reward::{score_correct, score_format, ConfidenceLadder, DEFAULT_BETA};

/// Position of an operation: step `t` and index `j` within the step, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpPos {
    pub t: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionWitness {
    pub first: OpPos,
    pub second: OpPos,
    pub label: String,
    pub first_op: DrawOperation,
    pub second_op: DrawOperation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateWitness {
    pub first: OpPos,
    pub second: OpPos,
    pub op: DrawOperation,
}

fn flatten(trace: &EpisodeTrace) -> Vec<(OpPos, &DrawOperation)> {
    trace.ops().map(|(t, j, op)| (OpPos { t, j }, op)).collect()
}

/// First reflecting pair in lexicographic `(t1, u, t2, v)` order.
pub fn detect_reflection(trace: &EpisodeTrace) -> Option<ReflectionWitness> {
    detect_reflection_in(&flatten(trace))
}

/// Same as [`detect_reflection`] over an explicit, position-ordered list.
pub fn detect_reflection_in(ops: &[(OpPos, &DrawOperation)]) -> Option<ReflectionWitness> {
    let labels: Vec<String> = ops.iter().map(|(_, op)| op.normalized_label()).collect();
    let canon: Vec<_> = ops.iter().map(|(_, op)| op.canonical()).collect();
    let mut by_label: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(l.as_str()).or_default().push(i);
    }
    for a in 0..ops.len() {
        let group = &by_label[labels[a].as_str()];
        if let Some(&b) = group.iter().find(|&&b| b > a && canon[b] != canon[a]) {
            return Some(ReflectionWitness {
                first: ops[a].0,
                second: ops[b].0,
                label: labels[a].clone(),
                first_op: ops[a].1.clone(),
                second_op: ops[b].1.clone(),
            });
        }
    }
    None
}

/// First canonically equal pair in lexicographic order.
pub fn detect_duplicate(trace: &EpisodeTrace) -> Option<DuplicateWitness> {
    detect_duplicate_in(&flatten(trace))
}

pub fn detect_duplicate_in(ops: &[(OpPos, &DrawOperation)]) -> Option<DuplicateWitness> {
    let mut first_seen = HashMap::new();
    let mut best: Option<(usize, usize)> = None;
    for (b, (_, op)) in ops.iter().enumerate() {
        match first_seen.get(&op.canonical()) {
            // the earliest `a` with any later twin pairs with its next twin,
            // which is the first repeat of that key encountered
            Some(&a) => {
                if best.is_none_or(|(ba, _)| a < ba) {
                    best = Some((a, b));
                }
            }
            None => {
                first_seen.insert(op.canonical(), b);
            }
        }
    }
    best.map(|(a, b)| DuplicateWitness {
        first: ops[a].0,
        second: ops[b].0,
        op: ops[a].1.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub beta: f64,
    /// Minimum MRA for a numeric answer to count as correct.
    pub numeric_cut: f64,
    /// Minimum reasoning steps for cold-start data.
    pub min_steps: usize,
    pub ladder: ConfidenceLadder,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            numeric_cut: 0.5,
            min_steps: 3,
            ladder: ConfidenceLadder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject(String),
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Correct answer under the filter's rule: exact letter for choices,
/// `MRA >= numeric_cut` (and above `beta`) for numbers.
pub fn is_correct(trace: &EpisodeTrace, gt: AnswerValue, cfg: &FilterConfig) -> bool {
    let s = score_correct(gt, trace.final_answer.as_ref(), &cfg.ladder);
    match gt {
        AnswerValue::Choice(_) => s == 1.0,
        AnswerValue::Numeric(_) => s >= cfg.numeric_cut && s > cfg.beta,
    }
}

/// Reflective rejection sampling: keep traces that are correct, fully
/// executable, and show reflection.
pub fn rrs_filter(trace: &EpisodeTrace, gt: AnswerValue, cfg: &FilterConfig) -> Verdict {
    if !is_correct(trace, gt, cfg) {
        return Verdict::Reject("incorrect answer".into());
    }
    if score_format(trace) != 1 {
        return Verdict::Reject("format check failed".into());
    }
    if detect_reflection(trace).is_none() {
        return Verdict::Reject("no reflection".into());
    }
    Verdict::Accept
}

/// Cold-start data filter: correct, fully executable, and at least
/// `min_steps` reasoning steps.
pub fn cold_start_filter(trace: &EpisodeTrace, gt: AnswerValue, cfg: &FilterConfig) -> Verdict {
    if !is_correct(trace, gt, cfg) {
        return Verdict::Reject("incorrect answer".into());
    }
    if score_format(trace) != 1 {
        return Verdict::Reject("format check failed".into());
    }
    if trace.num_steps() < cfg.min_steps {
        return Verdict::Reject(format!(
            "{} step(s), need {}",
            trace.num_steps(),
            cfg.min_steps
        ));
    }
    Verdict::Accept
}
