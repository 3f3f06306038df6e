//! Group-relative advantages and the clipped surrogate objective, as plain
//! numeric functions over caller-supplied log-probabilities.
//!
//! Advantages are z-scores of episode rewards within a rollout group
//! (population standard deviation). Each path's advantage applies to all of
//! its policy-generated tokens; observation and prompt tokens are masked out
//! and excluded from the per-path normalization. There is no KL term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::EpisodeTrace;

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
/// Groups whose reward spread is at or below this get all-zero advantages.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group needs at least 2 scores, got {0}")]
    GroupTooSmall(usize),
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("clip epsilon must be in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("token spans do not align with the trace: {0}")]
    Alignment(String),
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn group_advantages(scores: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if scores.len() < 2 {
        return Err(GrpoError::GroupTooSmall(scores.len()));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(GrpoError::NonFinite);
    }
    let m = mean(scores);
    let sd = population_std(scores);
    if sd <= STD_FLOOR {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| (s - m) / sd).collect())
}

/// `min(rho * a, clip(rho, 1 - eps, 1 + eps) * a)` for one token.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTerms {
    /// Per-token terms; masked tokens are 0.
    pub terms: Vec<f64>,
    /// Sum of unmasked terms divided by their count (0 when none).
    pub masked_mean: f64,
    pub n_tokens: usize,
}

pub fn clipped_surrogate(
    logp_new: &[f64],
    logp_old: &[f64],
    advantage: f64,
    eps: f64,
    mask: &[bool],
) -> Result<SurrogateTerms, GrpoError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(GrpoError::InvalidEpsilon(eps));
    }
    if logp_new.len() != logp_old.len() || logp_new.len() != mask.len() {
        return Err(GrpoError::Shape(format!(
            "logp_new {}, logp_old {}, mask {}",
            logp_new.len(),
            logp_old.len(),
            mask.len()
        )));
    }
    let mut terms = Vec::with_capacity(mask.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&new, &old), &keep) in logp_new.iter().zip(logp_old).zip(mask) {
        if !keep {
            terms.push(0.0);
            continue;
        }
        let term = surrogate_term((new - old).exp(), advantage, eps);
        terms.push(term);
        sum += term;
        n += 1;
    }
    Ok(SurrogateTerms {
        terms,
        masked_mean: if n == 0 { 0.0 } else { sum / n as f64 },
        n_tokens: n,
    })
}

/// Token-level data for one rollout path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTokens {
    pub score: f64,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Negative mean over the group of each path's masked-mean surrogate.
pub fn group_loss(paths: &[PathTokens], eps: f64) -> Result<f64, GrpoError> {
    let scores: Vec<f64> = paths.iter().map(|p| p.score).collect();
    let adv = group_advantages(&scores)?;
    let mut total = 0.0;
    for (p, a) in paths.iter().zip(adv) {
        total += clipped_surrogate(&p.logp_new, &p.logp_old, a, eps, &p.mask)?.masked_mean;
    }
    Ok(-total / paths.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    /// System/user prompt text, including injected follow-up prompts.
    Prompt,
    /// Reasoning text `r_t`.
    Thought,
    /// Drawing-operation tokens `e_t`.
    Operations,
    /// Tool output `o_t` (image tokens).
    Observation,
}

/// A contiguous run of `len` tokens belonging to step `step` (0 = before the
/// first step).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub step: usize,
    pub role: SpanRole,
    pub len: usize,
}

/// Loss mask: true exactly on thought and operation tokens.
///
/// Spans must be in step order; every step of `trace` needs exactly one
/// `Thought` span, an `Operations` span iff it recorded operations, and an
/// `Observation` span iff it produced images, in that order. `Prompt` spans may
/// appear anywhere.
pub fn token_mask(trace: &EpisodeTrace, spans: &[TokenSpan]) -> Result<Vec<bool>, GrpoError> {
    let steps = trace.num_steps();
    // per step: seen thought, ops, observation
    let mut seen = vec![[0usize; 3]; steps + 1];
    let mut last_step = 0;
    for (i, s) in spans.iter().enumerate() {
        let bad = |m: String| Err(GrpoError::Alignment(format!("span {i}: {m}")));
        if s.step < last_step {
            return bad(format!("step {} after step {last_step}", s.step));
        }
        last_step = s.step;
        if s.step > steps {
            return bad(format!("step {} beyond trace length {steps}", s.step));
        }
        let slot = match s.role {
            SpanRole::Prompt => continue,
            SpanRole::Thought => 0,
            SpanRole::Operations => 1,
            SpanRole::Observation => 2,
        };
        if s.step == 0 {
            return bad("only prompt spans may precede step 1".into());
        }
        let c = &mut seen[s.step];
        if c[slot] > 0 {
            return bad(format!("duplicate {:?} span for step {}", s.role, s.step));
        }
        if c[slot + 1..].iter().any(|&n| n > 0) {
            return bad(format!("{:?} span out of order in step {}", s.role, s.step));
        }
        c[slot] = 1;
    }
    for rec in &trace.steps {
        let c = seen[rec.t];
        let want = [1, !rec.ops.is_empty() as usize, !rec.observations().is_empty() as usize];
        if c != want {
            return Err(GrpoError::Alignment(format!(
                "step {}: expected thought/ops/observation spans {:?}, got {:?}",
                rec.t, want, c
            )));
        }
    }
    Ok(spans
        .iter()
        .flat_map(|s| {
            let keep = matches!(s.role, SpanRole::Thought | SpanRole::Operations);
            std::iter::repeat_n(keep, s.len)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_score_example() {
        assert_eq!(group_advantages(&[2.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn degenerate_and_small_groups() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantages(&[1.0]), Err(GrpoError::GroupTooSmall(1)));
        assert_eq!(group_advantages(&[1.0, f64::NAN]), Err(GrpoError::NonFinite));
    }

    #[test]
    fn surrogate_worked_examples() {
        let eps = 0.2;
        let r = clipped_surrogate(&[-1.0, -2.0], &[-1.0, -2.0], 0.7, eps, &[true, true]).unwrap();
        assert_eq!(r.terms, vec![0.7, 0.7]);
        assert!((surrogate_term(1.5, 1.0, eps) - 1.2).abs() < 1e-12);
        assert!((surrogate_term(0.5, -1.0, eps) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn masked_tokens_leave_normalization() {
        let r = clipped_surrogate(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 2.0, 0.2, &[true, false, true]).unwrap();
        assert_eq!(r.terms, vec![2.0, 0.0, 2.0]);
        assert_eq!(r.n_tokens, 2);
        assert_eq!(r.masked_mean, 2.0);
        assert!(matches!(
            clipped_surrogate(&[0.0], &[0.0, 1.0], 1.0, 0.2, &[true]),
            Err(GrpoError::Shape(_))
        ));
        assert_eq!(
            clipped_surrogate(&[0.0], &[0.0], 1.0, 1.0, &[true]),
            Err(GrpoError::InvalidEpsilon(1.0))
        );
    }

    #[test]
    fn equal_rewards_give_zero_loss() {
        let p = |s| PathTokens {
            score: s,
            logp_new: vec![-0.1, -0.3],
            logp_old: vec![-0.2, -0.1],
            mask: vec![true, true],
        };
        assert_eq!(group_loss(&[p(1.0), p(1.0), p(1.0)], 0.2).unwrap(), 0.0);
        let l = group_loss(&[p(2.0), p(0.0)], 0.2).unwrap();
        assert!(l.is_finite());
    }
}
