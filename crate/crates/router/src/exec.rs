//! Execution interfaces shared by the decomposer, the allocation search and
//! the end-to-end workflow. Everything that touches a model (real or
//! simulated) goes through these traits.

use serde::{Deserialize, Serialize};

use crate::decomp::Subtask;
use crate::error::Result;
use crate::pool::TokenUsage;

/// One task to be routed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub text: String,
    /// Opaque answer payload the checker compares against.
    pub ground_truth: String,
    pub benchmark_tag: String,
}

/// Marker fed to downstream steps when an upstream step failed. Steps still
/// run so the cost ledger reflects real behavior.
pub const FAILURE_MARKER: &str = "<<STEP_FAILED>>";

/// Input handed to a step: either the bare task, the previous step's output,
/// or an explicit failure marker.
#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    TaskOnly,
    Previous(String),
    Failed,
}

impl StepInput {
    pub fn is_failed(&self) -> bool {
        matches!(self, StepInput::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub content: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
}

/// Runs one subtask on one model.
pub trait StepExecutor {
    fn execute(
        &self,
        task: &TaskRecord,
        subtask: &Subtask,
        model_id: usize,
        input: &StepInput,
    ) -> Result<StepOutcome>;
}

/// Decides whether a final answer solves the task.
pub trait AnswerChecker {
    fn accepts(&self, task: &TaskRecord, final_answer: &str) -> bool;
}

/// Exact string match against the task's ground truth.
pub struct ExactMatchChecker;

impl AnswerChecker for ExactMatchChecker {
    fn accepts(&self, task: &TaskRecord, final_answer: &str) -> bool {
        task.ground_truth == final_answer
    }
}

/// Combines step outputs into the final answer. The default takes the last
/// step's final result.
pub trait Integrator {
    fn integrate(&self, task: &TaskRecord, step_contents: &[String]) -> String;
}

pub struct LastStepIntegrator;

impl Integrator for LastStepIntegrator {
    fn integrate(&self, _task: &TaskRecord, step_contents: &[String]) -> String {
        step_contents.last().cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct ChainStep {
    pub model_id: usize,
    pub content: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub failed: bool,
}

/// Run a subtask chain strictly in order, feeding each output forward.
/// A failed step (executor error or marker output) propagates the failure
/// marker; downstream steps still execute.
pub fn run_chain(
    task: &TaskRecord,
    subtasks: &[Subtask],
    assignments: &[usize],
    executor: &dyn StepExecutor,
) -> Vec<ChainStep> {
    debug_assert_eq!(subtasks.len(), assignments.len());
    let mut steps = Vec::with_capacity(subtasks.len());
    let mut input = StepInput::TaskOnly;
    for (subtask, &model_id) in subtasks.iter().zip(assignments) {
        let step = match executor.execute(task, subtask, model_id, &input) {
            Ok(out) => {
                let failed = out.content == FAILURE_MARKER;
                ChainStep {
                    model_id,
                    content: out.content,
                    usage: out.usage,
                    latency_ms: out.latency_ms,
                    failed,
                }
            }
            Err(_) => ChainStep {
                model_id,
                content: FAILURE_MARKER.to_string(),
                usage: TokenUsage::default(),
                latency_ms: 0,
                failed: true,
            },
        };
        input = if step.failed {
            StepInput::Failed
        } else {
            StepInput::Previous(step.content.clone())
        };
        steps.push(step);
    }
    steps
}
