//! Benchmark/task records and the JSONL task loader.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id": "q1", "images": ["img/q1.png"], "question": "...", "type": "choice",
//!  "options": ["A. left", "B. right"], "answer": "B", "subtask": "relation"}
//! ```
//!
//! `type` is `choice` (answer: one letter) or `numeric` (answer: a number).
//! `options`, `subtask` and `video` (frames in `images`) are optional. Image
//! paths are relative to the task file's directory. Unknown fields are kept
//! out of the way; maze records additionally carry `grid_size`, `start`,
//! `candidates` and `actions`, which the oracle policy reads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canvas::{decode_png, CanvasError, RasterImage};
use crate::dsl::{AnswerValue, QuestionType};
use crate::maze::{Cell, Move};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeMeta {
    pub grid_size: usize,
    pub start: Cell,
    /// Cells labelled A, B, C, D in order.
    pub candidates: Vec<Cell>,
    pub actions: Vec<Move>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub images: Vec<String>,
    pub question: String,
    #[serde(rename = "type")]
    pub qtype: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer: AnswerValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub video: bool,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub maze: Option<MazeMeta>,
}

impl Task {
    pub fn load_images(&self, base: &Path) -> Result<Vec<RasterImage>, TaskError> {
        self.images
            .iter()
            .map(|rel| {
                let path = base.join(rel);
                let bytes = fs::read(&path).map_err(|e| TaskError::Io(path.clone(), e))?;
                decode_png(&bytes).map_err(|e| TaskError::Image(path, e))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: usize,
    pub fields: Vec<String>,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)?;
        if !self.fields.is_empty() {
            write!(f, " (fields: {})", self.fields.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Image(PathBuf, CanvasError),
    #[error("{} invalid row(s): {}", .0.len(), .0.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<RowError>),
}

fn check_row(v: &Value) -> Vec<String> {
    let mut bad = Vec::new();
    let Some(obj) = v.as_object() else {
        return vec!["<row is not an object>".into()];
    };
    let is_str = |k: &str| obj.get(k).is_some_and(Value::is_string);
    if !is_str("id") {
        bad.push("id".into());
    }
    if !is_str("question") {
        bad.push("question".into());
    }
    match obj.get("images").and_then(Value::as_array) {
        Some(a) if !a.is_empty() && a.iter().all(Value::is_string) => {}
        _ => bad.push("images".into()),
    }
    let qtype = obj.get("type").and_then(Value::as_str);
    match qtype {
        Some("choice") | Some("numeric") => {}
        _ => bad.push("type".into()),
    }
    let answer_ok = match (qtype, obj.get("answer")) {
        (Some("choice"), Some(Value::String(s))) => {
            s.chars().count() == 1 && s.chars().all(|c| c.is_ascii_uppercase())
        }
        (Some("numeric"), Some(Value::Number(n))) => n.as_f64().is_some_and(f64::is_finite),
        // a bad or missing type is already reported; don't blame the answer
        (_, Some(_)) if !matches!(qtype, Some("choice" | "numeric")) => true,
        _ => false,
    };
    if !answer_ok {
        bad.push("answer".into());
    }
    if let Some(o) = obj.get("options") {
        if !o.as_array().is_some_and(|a| a.iter().all(Value::is_string)) {
            bad.push("options".into());
        }
    }
    if obj.get("subtask").is_some_and(|s| !s.is_string()) {
        bad.push("subtask".into());
    }
    bad
}

/// Parses task JSONL. Every bad row is reported with its 1-based line number
/// and the offending fields; blank lines are skipped.
pub fn parse_tasks(text: &str) -> Result<Vec<Task>, TaskError> {
    let mut tasks = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = |fields: Vec<String>, message: String| RowError {
            line: i + 1,
            fields,
            message,
        };
        let v: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                errors.push(row(vec![], format!("invalid JSON: {e}")));
                continue;
            }
        };
        let bad = check_row(&v);
        if !bad.is_empty() {
            errors.push(row(bad, "missing or invalid fields".into()));
            continue;
        }
        match serde_json::from_value::<Task>(v) {
            Ok(t) => tasks.push(t),
            Err(e) => errors.push(row(vec![], e.to_string())),
        }
    }
    if errors.is_empty() {
        Ok(tasks)
    } else {
        Err(TaskError::Schema(errors))
    }
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>, TaskError> {
    let text = fs::read_to_string(path).map_err(|e| TaskError::Io(path.to_path_buf(), e))?;
    parse_tasks(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"id":"a","images":["a.png"],"question":"which?","type":"choice","options":["A. x","B. y"],"answer":"B","subtask":"rel"}
{"id":"b","images":["b.png"],"question":"how far?","type":"numeric","answer":2.5}

{"id":"c","images":["c1.png","c2.png"],"question":"count","type":"numeric","answer":3,"video":true}
"#;

    #[test]
    fn loads_well_formed_rows() {
        let tasks = parse_tasks(GOOD).unwrap();
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks[0].answer, AnswerValue::Choice('B'));
        assert_eq!(tasks[1].answer, AnswerValue::Numeric(2.5));
        assert!(tasks[2].video);
        assert_eq!(tasks[0].maze, None);
    }

    #[test]
    fn reports_missing_answer_with_line() {
        let text = format!(
            "{}\n{}\n",
            GOOD.lines().next().unwrap(),
            r#"{"id":"x","images":["x.png"],"question":"q","type":"choice"}"#
        );
        match parse_tasks(&text) {
            Err(TaskError::Schema(rows)) => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[0].line, 2);
                assert_eq!(rows[0].fields, vec!["answer".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_every_bad_field() {
        let text = r#"{"images":[],"question":1,"type":"essay","answer":"B","options":"A"}"#;
        let Err(TaskError::Schema(rows)) = parse_tasks(text) else {
            panic!()
        };
        assert_eq!(rows[0].fields, vec!["id", "question", "images", "type", "options"]);
        assert!(parse_tasks("{not json").is_err());
    }
}
