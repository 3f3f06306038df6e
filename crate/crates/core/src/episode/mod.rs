//! Rollout state machine: think, draw, observe, repeat until an answer or a
//! termination rule fires.
//!
//! An episode owns its [`ImageRegistry`] and trace. Each step the policy sees
//! the whole conversation so far (inputs, question, every earlier reply and
//! observation), replies with text, and the reply is parsed and executed:
//!
//! * a final answer ends the episode (`answered`);
//! * no valid operation and no answer ends it (`no-op-fault`);
//! * operations that would push the registry past `alpha` end it (`image-cap`);
//! * an operation canonically equal to one already executed ends it
//!   (`duplicate-op`);
//! * otherwise every operation runs against its target image and each output
//!   is appended to the registry.
//!
//! When the next step is the last one allowed, or the registry is already
//! full, the prompt carries the final-answer instruction. A reply to it without
//! an answer ends the episode with `step-cap` (or `image-cap`).

pub mod prompts;
pub mod remote;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{draw_bbox, draw_polyline, DrawStyle, RasterImage};
use crate::dsl::{
    extract_answer, parse_response_lenient, CanonicalOp, DrawOperation, FinalAnswer, Geometry,
    OpKind, PolicyResponse, QuestionType,
};
use crate::task::Task;

pub use prompts::{ContentPart, Message, PromptKind, Role};

pub const DEFAULT_ALPHA: usize = 42;
pub const DEFAULT_MAX_STEPS: usize = 16;
pub const DEFAULT_FRAME_BUDGET: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error("task has no input images")]
    NoInputs,
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
}

/// Where a registry image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    /// The `n`-th original input (1-based).
    Input { n: usize },
    /// Output of operation `op` (1-based) at step `step`.
    Drawn { step: usize, op: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub index: usize,
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// Append-only, 1-based store of inputs followed by drawing outputs.
#[derive(Debug, Clone, Default)]
pub struct ImageRegistry {
    images: Vec<RasterImage>,
    provenance: Vec<Provenance>,
    input_count: usize,
}

impl ImageRegistry {
    pub fn new(inputs: Vec<RasterImage>) -> Self {
        let provenance = (1..=inputs.len()).map(|n| Provenance::Input { n }).collect();
        Self {
            input_count: inputs.len(),
            images: inputs,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_count(&self) -> usize {
        self.input_count
    }

    pub fn get(&self, index: usize) -> Option<&RasterImage> {
        index.checked_sub(1).and_then(|i| self.images.get(i))
    }

    pub fn provenance(&self, index: usize) -> Option<Provenance> {
        index.checked_sub(1).and_then(|i| self.provenance.get(i)).copied()
    }

    /// Appends and returns the new 1-based index.
    fn push(&mut self, image: RasterImage, from: Provenance) -> usize {
        self.images.push(image);
        self.provenance.push(from);
        self.images.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &RasterImage, Provenance)> {
        self.images
            .iter()
            .zip(&self.provenance)
            .enumerate()
            .map(|(i, (img, p))| (i + 1, img, *p))
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.provenance
            .iter()
            .enumerate()
            .map(|(i, p)| RegistryEntry {
                index: i + 1,
                provenance: *p,
                path: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Maximum number of images the registry may ever hold.
    pub alpha: usize,
    /// Maximum reasoning steps, the answering step included.
    pub max_steps: usize,
    /// Video inputs are uniformly subsampled to at most this many frames.
    pub frame_budget: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            max_steps: DEFAULT_MAX_STEPS,
            frame_budget: DEFAULT_FRAME_BUDGET,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, input_count: usize) -> Result<(), EpisodeError> {
        if self.max_steps == 0 {
            return Err(EpisodeError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if self.frame_budget == 0 {
            return Err(EpisodeError::InvalidConfig("frame_budget must be >= 1".into()));
        }
        if self.alpha < input_count {
            return Err(EpisodeError::InvalidConfig(format!(
                "alpha {} is smaller than the {input_count} input image(s)",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Indices of `budget` frames spread uniformly over `n` (bin centres).
pub fn sample_frames(n: usize, budget: usize) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    (0..budget).map(|i| (2 * i + 1) * n / (2 * budget)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Answered,
    NoOpFault,
    ImageCap,
    DuplicateOp,
    StepCap,
    PolicyError,
}

impl Termination {
    /// Early terminations whose reward is zero regardless of anything else.
    pub fn forces_zero_reward(self) -> bool {
        matches!(
            self,
            Termination::NoOpFault
                | Termination::ImageCap
                | Termination::DuplicateOp
                | Termination::PolicyError
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Answered => "answered",
            Termination::NoOpFault => "no-op-fault",
            Termination::ImageCap => "image-cap",
            Termination::DuplicateOp => "duplicate-op",
            Termination::StepCap => "step-cap",
            Termination::PolicyError => "policy-error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OpStatus {
    Executed { output: usize },
    NonExecutable { reason: String },
    /// Not attempted because the step terminated the episode.
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpOutcome {
    pub op: DrawOperation,
    #[serde(flatten)]
    pub status: OpStatus,
}

impl OpOutcome {
    pub fn executed(&self) -> bool {
        matches!(self.status, OpStatus::Executed { .. })
    }
}

/// One `(r_t, e_t, o_t)` triple plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub prompt: PromptKind,
    pub thought: String,
    pub ops: Vec<OpOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// Format problems: malformed records, discarded operations, ...
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

impl StepRecord {
    /// Registry indices produced at this step (`o_t`).
    pub fn observations(&self) -> Vec<usize> {
        self.ops
            .iter()
            .filter_map(|o| match o.status {
                OpStatus::Executed { output } => Some(output),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task_id: String,
    #[serde(default)]
    pub attempt: u32,
    pub question_type: QuestionType,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Raw text after the answer marker, parseable or not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    pub final_answer: Option<FinalAnswer>,
    pub registry: Vec<RegistryEntry>,
}

impl EpisodeTrace {
    /// Every recorded operation as `(t, j, op)`, both 1-based, in order.
    pub fn ops(&self) -> impl Iterator<Item = (usize, usize, &DrawOperation)> {
        self.steps
            .iter()
            .flat_map(|s| s.ops.iter().enumerate().map(move |(j, o)| (s.t, j + 1, &o.op)))
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.ops().filter(|(_, _, op)| op.kind() == kind).count()
    }

    pub fn all_ops_executed(&self) -> bool {
        self.steps.iter().all(|s| s.ops.iter().all(OpOutcome::executed))
    }

    pub fn has_violations(&self) -> bool {
        self.steps.iter().any(|s| !s.violations.is_empty())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct PolicyError(pub String);

/// Everything a policy may condition on at one step.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub task: &'a Task,
    pub conversation: &'a [Message],
    pub registry: &'a ImageRegistry,
    /// 1-based step being requested.
    pub step: usize,
    pub prompt: PromptKind,
    pub attempt: u32,
}

/// The model under rollout. Implementations are shared across concurrently
/// running episodes, so per-episode state must be derived from the request.
pub trait Policy: Send + Sync {
    fn respond(&self, req: &PolicyRequest<'_>) -> Result<String, PolicyError>;

    /// True when replies depend on randomness beyond the request and seed.
    fn is_stochastic(&self) -> bool {
        false
    }
}

/// Replies with the same text every step.
#[derive(Debug, Clone)]
pub struct FixedPolicy(pub String);

impl Policy for FixedPolicy {
    fn respond(&self, _: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        Ok(self.0.clone())
    }
}

/// Replays a fixed list of replies, one per step; errors once exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy(pub Vec<String>);

impl Policy for ScriptedPolicy {
    fn respond(&self, req: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        self.0
            .get(req.step - 1)
            .cloned()
            .ok_or_else(|| PolicyError(format!("script has no reply for step {}", req.step)))
    }
}

impl<F> Policy for F
where
    F: Fn(&PolicyRequest<'_>) -> Result<String, PolicyError> + Send + Sync,
{
    fn respond(&self, req: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        self(req)
    }
}

/// What the rules say about a parsed reply, before anything executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Continue,
    Answer,
    Stop(Termination),
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trace: EpisodeTrace,
    pub registry: ImageRegistry,
}

/// Live episode. Drive it with [`EpisodeState::request`] and
/// [`EpisodeState::apply_reply`] (or let [`run_episode`] do it).
#[derive(Debug)]
pub struct EpisodeState<'a> {
    task: &'a Task,
    cfg: EpisodeConfig,
    attempt: u32,
    registry: ImageRegistry,
    conversation: Vec<Message>,
    steps: Vec<StepRecord>,
    executed: HashSet<CanonicalOp>,
    termination: Option<Termination>,
    error: Option<String>,
    answer_text: Option<String>,
    final_answer: Option<FinalAnswer>,
}

impl<'a> EpisodeState<'a> {
    pub fn new(
        task: &'a Task,
        inputs: Vec<RasterImage>,
        cfg: EpisodeConfig,
        attempt: u32,
    ) -> Result<Self, EpisodeError> {
        if inputs.is_empty() {
            return Err(EpisodeError::NoInputs);
        }
        let inputs = if task.video {
            let keep = sample_frames(inputs.len(), cfg.frame_budget);
            keep.into_iter().map(|i| inputs[i].clone()).collect()
        } else {
            inputs
        };
        cfg.validate(inputs.len())?;
        let n = inputs.len();
        let mut st = Self {
            task,
            cfg,
            attempt,
            registry: ImageRegistry::new(inputs),
            conversation: vec![
                Message::text(Role::System, prompts::SYSTEM_PROMPT),
                prompts::initial_prompt(task, n),
            ],
            steps: Vec::new(),
            executed: HashSet::new(),
            termination: None,
            error: None,
            answer_text: None,
            final_answer: None,
        };
        st.add_final_answer_prompt_if_forced();
        Ok(st)
    }

    pub fn registry(&self) -> &ImageRegistry {
        &self.registry
    }

    pub fn conversation(&self) -> &[Message] {
        &self.conversation
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    pub fn is_done(&self) -> bool {
        self.termination.is_some()
    }

    /// 1-based number of the step about to be requested.
    pub fn next_step(&self) -> usize {
        self.steps.len() + 1
    }

    /// Whether the next step must produce the final answer.
    pub fn answer_forced(&self) -> bool {
        self.next_step() >= self.cfg.max_steps || self.registry.len() >= self.cfg.alpha
    }

    pub fn prompt_kind(&self) -> PromptKind {
        if self.answer_forced() {
            PromptKind::FinalAnswer
        } else if self.steps.is_empty() {
            PromptKind::Initial
        } else {
            PromptKind::FollowUp
        }
    }

    fn add_final_answer_prompt_if_forced(&mut self) {
        if self.answer_forced() {
            let part = prompts::final_answer_prompt(self.task.qtype);
            if let Some(last) = self.conversation.last_mut() {
                last.content.push(part);
            }
        }
    }

    pub fn request(&self) -> PolicyRequest<'_> {
        PolicyRequest {
            task: self.task,
            conversation: &self.conversation,
            registry: &self.registry,
            step: self.next_step(),
            prompt: self.prompt_kind(),
            attempt: self.attempt,
        }
    }

    /// Applies the termination rules to a parsed reply without changing state.
    pub fn check_termination(&self, resp: &PolicyResponse) -> StepStatus {
        if resp.final_answer.is_some() {
            return StepStatus::Answer;
        }
        if resp.ops.is_empty() {
            return StepStatus::Stop(Termination::NoOpFault);
        }
        if self.registry.len() + resp.ops.len() > self.cfg.alpha {
            return StepStatus::Stop(Termination::ImageCap);
        }
        let mut seen = HashSet::new();
        for op in &resp.ops {
            let c = op.canonical();
            if self.executed.contains(&c) || !seen.insert(c) {
                return StepStatus::Stop(Termination::DuplicateOp);
            }
        }
        if self.answer_forced() {
            return StepStatus::Stop(Termination::StepCap);
        }
        StepStatus::Continue
    }

    /// Records the policy's raw reply and advances the episode by one step.
    pub fn apply_reply(&mut self, text: &str) -> StepStatus {
        assert!(!self.is_done(), "episode already terminated");
        self.conversation.push(Message::text(Role::Assistant, text));
        let parsed = parse_response_lenient(text);
        let violations = parsed.errors.iter().map(ToString::to_string).collect();
        self.step(parsed.response, violations)
    }

    /// Executes one parsed step. Malformed-record messages go in `violations`.
    pub fn step(&mut self, resp: PolicyResponse, mut violations: Vec<String>) -> StepStatus {
        assert!(!self.is_done(), "episode already terminated");
        let t = self.next_step();
        let prompt = self.prompt_kind();
        let status = self.check_termination(&resp);
        let mut ops = Vec::with_capacity(resp.ops.len());
        match status {
            StepStatus::Answer => {
                if !resp.ops.is_empty() {
                    violations.push(format!(
                        "{} operation(s) alongside the final answer were discarded",
                        resp.ops.len()
                    ));
                }
                let text = resp.final_answer.clone().unwrap_or_default();
                self.final_answer = extract_answer(&text, self.task.qtype).ok();
                self.answer_text = Some(text);
                self.termination = Some(Termination::Answered);
            }
            StepStatus::Stop(cause) => {
                ops = resp
                    .ops
                    .iter()
                    .map(|op| OpOutcome {
                        op: op.clone(),
                        status: OpStatus::Skipped {
                            reason: cause.as_str().to_string(),
                        },
                    })
                    .collect();
                self.termination = Some(cause);
            }
            StepStatus::Continue => {
                for (j, op) in resp.ops.iter().enumerate() {
                    let status = self.execute(op, t, j + 1);
                    ops.push(OpOutcome {
                        op: op.clone(),
                        status,
                    });
                }
            }
        }
        let rec = StepRecord {
            t,
            prompt,
            thought: resp.thought,
            ops,
            answer: resp.final_answer.filter(|_| status == StepStatus::Answer),
            violations,
        };
        let new_images = rec.observations();
        self.steps.push(rec);
        if status == StepStatus::Continue {
            self.conversation
                .push(prompts::follow_up_prompt(&new_images, self.registry.len()));
            self.add_final_answer_prompt_if_forced();
        }
        status
    }

    fn execute(&mut self, op: &DrawOperation, t: usize, j: usize) -> OpStatus {
        if let Err(e) = op.validate() {
            return OpStatus::NonExecutable {
                reason: e.to_string(),
            };
        }
        let Some(target) = self.registry.get(op.k) else {
            return OpStatus::NonExecutable {
                reason: format!(
                    "image index {} out of range (1-{})",
                    op.k,
                    self.registry.len()
                ),
            };
        };
        let style = DrawStyle::for_label(&op.label);
        let drawn = match &op.geometry {
            Geometry::Box(b) => draw_bbox(target, b, &op.label, &style),
            Geometry::Line(l) => draw_polyline(target, l, &op.label, &style),
        };
        match drawn {
            Ok(img) => {
                self.executed.insert(op.canonical());
                let output = self.registry.push(img, Provenance::Drawn { step: t, op: j });
                OpStatus::Executed { output }
            }
            Err(e) => OpStatus::NonExecutable {
                reason: e.to_string(),
            },
        }
    }

    /// Ends the episode on a transport failure.
    pub fn fail(&mut self, err: PolicyError) {
        self.error = Some(err.0);
        self.termination = Some(Termination::PolicyError);
    }

    pub fn finish(self) -> EpisodeOutcome {
        let termination = self
            .termination
            .expect("finish() called on an unterminated episode");
        EpisodeOutcome {
            trace: EpisodeTrace {
                task_id: self.task.id.clone(),
                attempt: self.attempt,
                question_type: self.task.qtype,
                steps: self.steps,
                termination,
                error: self.error,
                answer_text: self.answer_text,
                final_answer: self.final_answer,
                registry: self.registry.entries(),
            },
            registry: self.registry,
        }
    }
}

/// Runs one episode to termination.
pub fn run_episode(
    policy: &dyn Policy,
    task: &Task,
    inputs: Vec<RasterImage>,
    cfg: &EpisodeConfig,
    attempt: u32,
) -> Result<EpisodeOutcome, EpisodeError> {
    let mut st = EpisodeState::new(task, inputs, *cfg, attempt)?;
    while !st.is_done() {
        match policy.respond(&st.request()) {
            Ok(text) => {
                st.apply_reply(&text);
            }
            Err(e) => st.fail(e),
        }
    }
    Ok(st.finish())
}
