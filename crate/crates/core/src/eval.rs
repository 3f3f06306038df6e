//! Benchmark scoring: per-subtask accuracy / MRA, behavioural statistics and
//! pass@k over repeated attempts.
//!
//! Each task's headline score comes from its lowest-numbered attempt. Choice
//! items score 1 on an exact letter match; numeric items score their MRA.
//! The overall figure is the unweighted mean of subtask scores when any task
//! names a subtask, else the mean over items.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{AnswerValue, OpKind};
use crate::episode::EpisodeTrace;
use crate::reflect::detect_reflection;
use crate::reward::{score_correct, ConfidenceLadder};
use crate::task::Task;

/// Subtask name used for tasks without one when others have one.
pub const UNGROUPED: &str = "(none)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trace for unknown task {0:?}")]
    UnknownTask(String),
    #[error("no trace for task {0:?}")]
    MissingTrace(String),
    #[error("task {task:?} has {have} attempt(s), pass@{k} needs {k}")]
    InsufficientAttempts { task: String, have: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("nothing to evaluate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ladder: ConfidenceLadder,
    /// Minimum MRA for a numeric attempt to count as solved in pass@k.
    pub numeric_cut: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ladder: ConfidenceLadder::default(),
            numeric_cut: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Mra,
    /// Subtask mixing choice and numeric items.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskScore {
    pub subtask: String,
    pub metric: Metric,
    pub count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    /// Fraction of scored traces containing a reflection.
    pub reflection_ratio: f64,
    pub mean_steps: f64,
    pub mean_box_ops: f64,
    pub mean_line_ops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub subtask: Option<String>,
    pub score: f64,
    pub correct: bool,
    pub steps: usize,
    pub box_ops: usize,
    pub line_ops: usize,
    pub reflective: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub n_traces: usize,
    /// Attempts per task (the minimum across tasks).
    pub attempts: usize,
    pub subtasks: Vec<SubtaskScore>,
    pub overall: f64,
    pub behavior: Behavior,
    /// `"pass@k"` for k = 1, 2, 4, ... up to `attempts`.
    pub pass_at_k: BTreeMap<String, f64>,
    pub items: Vec<ItemScore>,
}

/// Fraction of tasks with at least one success among their first `k` attempts.
pub fn pass_at_k(attempts: &[Vec<bool>], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if attempts.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for (i, a) in attempts.iter().enumerate() {
        if a.len() < k {
            return Err(EvalError::InsufficientAttempts {
                task: format!("#{i}"),
                have: a.len(),
                k,
            });
        }
        hits += a[..k].iter().any(|&x| x) as usize;
    }
    Ok(hits as f64 / attempts.len() as f64)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn solved(gt: AnswerValue, score: f64, cfg: &EvalConfig) -> bool {
    match gt {
        AnswerValue::Choice(_) => score == 1.0,
        AnswerValue::Numeric(_) => score >= cfg.numeric_cut,
    }
}

pub fn evaluate(
    traces: &[EpisodeTrace],
    tasks: &[Task],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::Empty);
    }
    let index: HashMap<&str, usize> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.as_str(), i))
        .collect();
    let mut by_task: Vec<Vec<&EpisodeTrace>> = vec![Vec::new(); tasks.len()];
    for tr in traces {
        let &i = index
            .get(tr.task_id.as_str())
            .ok_or_else(|| EvalError::UnknownTask(tr.task_id.clone()))?;
        by_task[i].push(tr);
    }
    for (t, group) in tasks.iter().zip(by_task.iter_mut()) {
        if group.is_empty() {
            return Err(EvalError::MissingTrace(t.id.clone()));
        }
        group.sort_by_key(|tr| tr.attempt);
    }

    let scored: Vec<(ItemScore, Vec<bool>)> = tasks
        .par_iter()
        .zip(by_task.par_iter())
        .map(|(task, group)| {
            let outcomes: Vec<bool> = group
                .iter()
                .map(|tr| {
                    let s = score_correct(task.answer, tr.final_answer.as_ref(), &cfg.ladder);
                    solved(task.answer, s, cfg)
                })
                .collect();
            let first = group[0];
            let score = score_correct(task.answer, first.final_answer.as_ref(), &cfg.ladder);
            let item = ItemScore {
                id: task.id.clone(),
                subtask: task.subtask.clone(),
                score,
                correct: outcomes[0],
                steps: first.num_steps(),
                box_ops: first.count_kind(OpKind::Box),
                line_ops: first.count_kind(OpKind::Line),
                reflective: detect_reflection(first).is_some(),
            };
            (item, outcomes)
        })
        .collect();
    let (items, outcomes): (Vec<ItemScore>, Vec<Vec<bool>>) = scored.into_iter().unzip();

    let grouped = tasks.iter().any(|t| t.subtask.is_some());
    let mut subtasks = Vec::new();
    if grouped {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in tasks.iter().enumerate() {
            groups
                .entry(t.subtask.as_deref().unwrap_or(UNGROUPED))
                .or_default()
                .push(i);
        }
        for (name, idx) in groups {
            let choice = idx
                .iter()
                .filter(|&&i| matches!(tasks[i].answer, AnswerValue::Choice(_)))
                .count();
            let metric = match choice {
                c if c == idx.len() => Metric::Accuracy,
                0 => Metric::Mra,
                _ => Metric::Mixed,
            };
            subtasks.push(SubtaskScore {
                subtask: name.to_string(),
                metric,
                count: idx.len(),
                score: mean(idx.iter().map(|&i| items[i].score)),
            });
        }
    }
    let overall = if grouped {
        mean(subtasks.iter().map(|s| s.score))
    } else {
        mean(items.iter().map(|i| i.score))
    };

    let attempts = outcomes.iter().map(Vec::len).min().unwrap_or(0);
    let mut pass = BTreeMap::new();
    let mut k = 1;
    while k <= attempts {
        pass.insert(format!("pass@{k}"), pass_at_k(&outcomes, k)?);
        k *= 2;
    }
    if attempts > 1 && !attempts.is_power_of_two() {
        pass.insert(format!("pass@{attempts}"), pass_at_k(&outcomes, attempts)?);
    }

    let behavior = Behavior {
        reflection_ratio: mean(items.iter().map(|i| i.reflective as u8 as f64)),
        mean_steps: mean(items.iter().map(|i| i.steps as f64)),
        mean_box_ops: mean(items.iter().map(|i| i.box_ops as f64)),
        mean_line_ops: mean(items.iter().map(|i| i.line_ops as f64)),
    };
    Ok(EvalReport {
        n_tasks: tasks.len(),
        n_traces: traces.len(),
        attempts,
        subtasks,
        overall,
        behavior,
        pass_at_k: pass,
        items,
    })
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![[
            "subtask".into(),
            "metric".into(),
            "n".into(),
            "score".into(),
        ]];
        for s in &self.subtasks {
            let metric = match s.metric {
                Metric::Accuracy => "accuracy",
                Metric::Mra => "mra",
                Metric::Mixed => "mixed",
            };
            rows.push([
                s.subtask.clone(),
                metric.into(),
                s.count.to_string(),
                format!("{:.4}", s.score),
            ]);
        }
        rows.push([
            "overall".into(),
            "mean".into(),
            self.n_tasks.to_string(),
            format!("{:.4}", self.overall),
        ]);
        let b = &self.behavior;
        for (name, v) in [
            ("reflection ratio", b.reflection_ratio),
            ("mean steps", b.mean_steps),
            ("mean box ops", b.mean_box_ops),
            ("mean line ops", b.mean_line_ops),
        ] {
            rows.push([name.into(), "behavior".into(), self.n_tasks.to_string(), format!("{v:.4}")]);
        }
        for (name, v) in &self.pass_at_k {
            rows.push([name.clone(), "pass".into(), self.n_tasks.to_string(), format!("{v:.4}")]);
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 6;
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}
