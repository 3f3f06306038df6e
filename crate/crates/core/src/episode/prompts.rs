//! Conversation messages and the three prompt roles: initial query, follow-up
//! after each drawing step, and the final-answer prompt that forces an answer
//! once the step or image budget runs out.

use serde::{Deserialize, Serialize};

use crate::dsl::QuestionType;
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    /// Reference to a registry image by its 1-based index.
    Image { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn image_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.content.iter().filter_map(|p| match p {
            ContentPart::Image { index } => Some(*index),
            ContentPart::Text { .. } => None,
        })
    }

    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Initial,
    FollowUp,
    FinalAnswer,
}

pub const SYSTEM_PROMPT: &str = "\
You reason about space by drawing on images. Every image has a 1-based index: \
the original inputs come first, and each drawing you request produces a new \
annotated copy appended after them.

Two drawing operations are available:
- box: a bounding box (x1, y1, x2, y2) in pixels, origin top-left.
- line: an auxiliary polyline through two or more (x, y) points.
Each takes the index k of the image to draw on and a short label describing \
what is annotated.

At each step, think in plain text, then either request drawings in one block

```draw
box k=1 p=(x1, y1, x2, y2) l=\"label\"
line k=1 p=[(x, y), (x, y)] l=\"label\"
```

or, when you are done, end with a single line `Final answer: <answer>`. \
Never do both in one step.";

fn answer_hint(qtype: QuestionType) -> &'static str {
    match qtype {
        QuestionType::Choice => "Answer with the option's letter.",
        QuestionType::Numeric => "Answer with a single numerical value (e.g. 42 or 3.14).",
    }
}

fn index_list(n: usize) -> String {
    match n {
        0 => "none".into(),
        1 => "1".into(),
        n => format!("1-{n}"),
    }
}

/// First user turn: every input image, then the question and options.
pub fn initial_prompt(task: &Task, input_count: usize) -> Message {
    let mut content: Vec<ContentPart> = (1..=input_count)
        .map(|index| ContentPart::Image { index })
        .collect();
    let kind = if task.video { "video frames" } else { "images" };
    let mut text = format!(
        "Input {kind}: {}.\nQuestion: {}",
        index_list(input_count),
        task.question
    );
    if let Some(opts) = &task.options {
        text.push_str("\nOptions:");
        for o in opts {
            text.push_str("\n");
            text.push_str(o);
        }
    }
    text.push('\n');
    text.push_str(answer_hint(task.qtype));
    content.push(ContentPart::Text { text });
    Message {
        role: Role::User,
        content,
    }
}

/// User turn after a drawing step: the new observation images and the index
/// range now available.
pub fn follow_up_prompt(new_images: &[usize], total: usize) -> Message {
    let mut content: Vec<ContentPart> = new_images
        .iter()
        .map(|&index| ContentPart::Image { index })
        .collect();
    let produced = if new_images.is_empty() {
        "No drawing was produced.".to_string()
    } else {
        let list: Vec<String> = new_images.iter().map(|i| i.to_string()).collect();
        format!("Drawing results: image(s) {}.", list.join(", "))
    };
    content.push(ContentPart::Text {
        text: format!(
            "{produced}\nAvailable images: {}.\nContinue reasoning: draw again or give the final answer.",
            index_list(total)
        ),
    });
    Message {
        role: Role::User,
        content,
    }
}

pub fn final_answer_prompt(qtype: QuestionType) -> ContentPart {
    ContentPart::Text {
        text: format!(
            "The drawing budget is exhausted. Do not draw again; give your final answer now as \
             `Final answer: <answer>`. {}",
            answer_hint(qtype)
        ),
    }
}
