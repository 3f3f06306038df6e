//! Rule-based episode reward.
//!
//! `total = 1[s_correct > beta] * (s_correct + s_format)`, and zero for
//! episodes cut short by a no-op fault, the image cap, a duplicated
//! operation, or a policy failure.
//!
//! Numeric answers use mean relative accuracy over the confidence ladder
//! `0.50, 0.55, ..., 0.95`: the fraction of thresholds `theta` for which
//! `|gt - pred| / |gt| < 1 - theta`. The ground truth's magnitude is the
//! denominator; a zero ground truth falls back to exact match.

use serde::{Deserialize, Serialize};

use crate::dsl::{AnswerValue, FinalAnswer};
use crate::episode::{EpisodeTrace, Termination};

pub const DEFAULT_BETA: f64 = 0.0;

/// Confidence thresholds for MRA, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceLadder(Vec<f64>);

impl Default for ConfidenceLadder {
    fn default() -> Self {
        Self((0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect())
    }
}

impl ConfidenceLadder {
    /// `None` unless the thresholds are finite, in `[0, 1)`, strictly increasing
    /// and non-empty.
    pub fn new(thresholds: Vec<f64>) -> Option<Self> {
        let ok = !thresholds.is_empty()
            && thresholds.iter().all(|t| t.is_finite() && (0.0..1.0).contains(t))
            && thresholds.windows(2).all(|w| w[0] < w[1]);
        ok.then_some(Self(thresholds))
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn score_choice(gt: char, pred: Option<&FinalAnswer>) -> f64 {
    match pred.map(|p| p.value) {
        Some(AnswerValue::Choice(c)) if c.eq_ignore_ascii_case(&gt) => 1.0,
        _ => 0.0,
    }
}

/// MRA of a raw prediction value.
pub fn mra(gt: f64, pred: f64, ladder: &ConfidenceLadder) -> f64 {
    if !gt.is_finite() || !pred.is_finite() {
        return 0.0;
    }
    if gt == 0.0 {
        return if pred == 0.0 { 1.0 } else { 0.0 };
    }
    let rel = (gt - pred).abs() / gt.abs();
    let hits = ladder
        .thresholds()
        .iter()
        .filter(|&&theta| rel < 1.0 - theta)
        .count();
    hits as f64 / ladder.len() as f64
}

pub fn score_numeric_mra(gt: f64, pred: Option<&FinalAnswer>, ladder: &ConfidenceLadder) -> f64 {
    match pred.map(|p| p.value) {
        Some(AnswerValue::Numeric(v)) => mra(gt, v, ladder),
        _ => 0.0,
    }
}

/// Correctness of a parsed answer against the ground truth of either kind.
pub fn score_correct(gt: AnswerValue, pred: Option<&FinalAnswer>, ladder: &ConfidenceLadder) -> f64 {
    match gt {
        AnswerValue::Choice(c) => score_choice(c, pred),
        AnswerValue::Numeric(v) => score_numeric_mra(v, pred, ladder),
    }
}

/// 1 when every recorded operation executed, no step carried a format
/// violation, and a final answer was parsed. A trace with no operations at
/// all can still score 1.
pub fn score_format(trace: &EpisodeTrace) -> u8 {
    let ok = trace.termination == Termination::Answered
        && trace.final_answer.is_some()
        && trace.all_ops_executed()
        && !trace.has_violations();
    ok as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub s_correct: f64,
    pub s_format: u8,
    pub gate: u8,
    pub total: f64,
    #[serde(default)]
    pub early_terminated: bool,
}

/// Gated combination. `termination` only matters through
/// [`Termination::forces_zero_reward`].
pub fn combine(s_correct: f64, s_format: u8, termination: Termination, beta: f64) -> RewardBreakdown {
    let gate = (s_correct > beta) as u8;
    let early = termination.forces_zero_reward();
    let total = if early {
        0.0
    } else {
        gate as f64 * (s_correct + s_format as f64)
    };
    RewardBreakdown {
        s_correct,
        s_format,
        gate,
        total,
        early_terminated: early,
    }
}

pub fn total_reward(
    trace: &EpisodeTrace,
    gt: AnswerValue,
    beta: f64,
    ladder: &ConfidenceLadder,
) -> RewardBreakdown {
    let s_correct = score_correct(gt, trace.final_answer.as_ref(), ladder);
    combine(s_correct, score_format(trace), trace.termination, beta)
}
