//! Drawing-augmented visual reasoning: image canvas and drawing operations,
//! the operation grammar, the multi-turn episode engine, rewards, reflection
//! filters, GRPO numerics, procedural maze tasks and the evaluation harness.

pub mod canvas;
pub mod dsl;
pub mod episode;
pub mod eval;
pub mod grpo;
pub mod maze;
pub mod reflect;
pub mod reward;
pub mod task;
