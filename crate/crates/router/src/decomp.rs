//! Task decomposition: subtask chains, their quality score, correctness
//! checking against a baseline model, and rejection-sampling selection of
//! the best candidate per task.
//!
//! The score of a decomposition `d` with `k` subtasks is
//! `w_c * k + w_p * sum(tokens) + w_d * coe_pairs` — lower is better. The
//! chosen candidate is the cheapest correct one, falling back to the
//! cheapest overall when no candidate is correct.
//!
//! # Example
//!
//! ```
//! use model_router::decomp::{
//!     score_decomposition, select_best, Decomposition, ScoreWeights, Subtask,
//! };
//!
//! let mut candidates: Vec<Decomposition> = (1..=3)
//!     .map(|k| {
//!         let subtasks = (0..k)
//!             .map(|i| {
//!                 let mut s = Subtask::new(i, format!("step {i}"));
//!                 s.token_count_eval = Some(100);
//!                 s
//!             })
//!             .collect();
//!         let mut d = Decomposition::new("task-0", subtasks);
//!         d.coe_pairs = Some(0);
//!         d.correctness = Some(k != 1); // the single-step candidate failed
//!         d
//!     })
//!     .collect();
//! for d in &mut candidates {
//!     score_decomposition(d, ScoreWeights::default()).unwrap();
//! }
//!
//! // rejection sampling: the cheapest *correct* candidate wins
//! let best = select_best(&candidates).unwrap();
//! assert_eq!(best.k(), 2);
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{run_chain, AnswerChecker, LastStepIntegrator, Integrator, StepExecutor, TaskRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    /// 0-based position in the chain.
    pub index: usize,
    pub text: String,
    /// Tokens consumed solving it with the evaluation model; set once the
    /// chain has been run.
    pub token_count_eval: Option<u64>,
}

impl Subtask {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Subtask { index, text: text.into(), token_count_eval: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub task_id: String,
    pub subtasks: Vec<Subtask>,
    /// Number of incoherent adjacent pairs, once judged.
    pub coe_pairs: Option<u32>,
    pub correctness: Option<bool>,
    pub score: Option<f64>,
}

impl Decomposition {
    pub fn new(task_id: impl Into<String>, subtasks: Vec<Subtask>) -> Self {
        Decomposition {
            task_id: task_id.into(),
            subtasks,
            coe_pairs: None,
            correctness: None,
            score: None,
        }
    }

    pub fn k(&self) -> usize {
        self.subtasks.len()
    }

    pub fn tokens_total(&self) -> Option<u64> {
        self.subtasks.iter().map(|s| s.token_count_eval).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_c: f64,
    pub w_p: f64,
    pub w_d: f64,
}

impl Default for ScoreWeights {
    /// Defaults are not fixed by the method; chosen so each term lands in the
    /// same order of magnitude on the simulator's task distribution.
    fn default() -> Self {
        ScoreWeights { w_c: 1.0, w_p: 0.01, w_d: 5.0 }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> bool {
        self.w_c > 0.0 && self.w_p > 0.0 && self.w_d > 0.0
    }
}

/// Weighted decomposition score; also stored on `d`. Lower is better.
pub fn score_decomposition(d: &mut Decomposition, w: ScoreWeights) -> Result<f64> {
    let coe = d.coe_pairs.ok_or(Error::MissingCoherence)?;
    let mut tokens = 0u64;
    for s in &d.subtasks {
        tokens += s.token_count_eval.ok_or(Error::MissingTokenCounts(s.index))?;
    }
    let score = w.w_c * d.k() as f64 + w.w_p * tokens as f64 + w.w_d * coe as f64;
    d.score = Some(score);
    Ok(score)
}

/// Judges whether two adjacent subtasks lack a logical connection.
pub trait CoherenceJudge {
    fn unrelated(&self, task_text: &str, a: &Subtask, b: &Subtask) -> Result<bool>;
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "that", "this", "from", "into", "are", "was", "then", "its",
];

fn content_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 3 && !STOPWORDS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Default judge when no LLM is configured: a pair is unrelated iff its
/// normalized content-token overlap is zero. Ignores the task text.
pub struct LexicalOverlapJudge;

impl CoherenceJudge for LexicalOverlapJudge {
    fn unrelated(&self, _task_text: &str, a: &Subtask, b: &Subtask) -> Result<bool> {
        let ta = content_tokens(&a.text);
        let tb = content_tokens(&b.text);
        Ok(!ta.iter().any(|t| tb.contains(t)))
    }
}

/// Count of adjacent pairs the judge flags as unrelated; 0 for k = 1.
pub fn evaluate_coherence(
    d: &mut Decomposition,
    task_text: &str,
    judge: &dyn CoherenceJudge,
) -> Result<u32> {
    let mut count = 0;
    for pair in d.subtasks.windows(2) {
        if judge.unrelated(task_text, &pair[0], &pair[1])? {
            count += 1;
        }
    }
    d.coe_pairs = Some(count);
    Ok(count)
}

/// Run the full chain with every subtask on the executor's bound model and
/// return the binary correctness of the integrated answer. Records token
/// usage on the subtasks. An executor failure counts as incorrect.
pub fn check_correctness(
    task: &TaskRecord,
    d: &mut Decomposition,
    baseline_model_id: usize,
    executor: &dyn StepExecutor,
    checker: &dyn AnswerChecker,
) -> Result<bool> {
    let assignments = vec![baseline_model_id; d.k()];
    let steps = run_chain(task, &d.subtasks, &assignments, executor);
    for (subtask, step) in d.subtasks.iter_mut().zip(&steps) {
        subtask.token_count_eval = Some(step.usage.total());
    }
    let contents: Vec<String> = steps.iter().map(|s| s.content.clone()).collect();
    let answer = LastStepIntegrator.integrate(task, &contents);
    let correct = !steps.iter().any(|s| s.failed) && checker.accepts(task, &answer);
    d.correctness = Some(correct);
    Ok(correct)
}

/// Rejection-sampling choice: cheapest correct candidate, else cheapest
/// overall. Ties go to fewer subtasks, then earlier generation order.
pub fn select_best(samples: &[Decomposition]) -> Result<&Decomposition> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let any_correct = samples.iter().any(|d| d.correctness == Some(true));
    let eligible = samples
        .iter()
        .filter(|d| !any_correct || d.correctness == Some(true));
    let best = eligible
        .min_by(|a, b| {
            let sa = a.score.expect("sample is scored");
            let sb = b.score.expect("sample is scored");
            sa.partial_cmp(&sb)
                .expect("scores are finite")
                .then(a.k().cmp(&b.k()))
        })
        .expect("at least one eligible sample");
    Ok(best)
}

/// Produces candidate decompositions for a task.
pub trait DecompositionGenerator {
    fn generate(&self, task: &TaskRecord, m: usize) -> Result<Vec<Decomposition>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompDatasetEntry {
    pub task_id: String,
    pub task_text: String,
    pub chosen: Decomposition,
    pub rejected_count: usize,
}

/// One selected decomposition per task, fully scored. Generator failures
/// skip the task so a build is restartable.
pub fn build_decomp_dataset(
    tasks: &[TaskRecord],
    generator: &dyn DecompositionGenerator,
    baseline_model_id: usize,
    executor: &dyn StepExecutor,
    checker: &dyn AnswerChecker,
    judge: &dyn CoherenceJudge,
    m: usize,
    w: ScoreWeights,
) -> Result<Vec<DecompDatasetEntry>> {
    let mut entries = Vec::new();
    for task in tasks {
        let mut candidates = match generator.generate(task, m) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("decomp generator failed on {}: {e}", task.task_id);
                continue;
            }
        };
        for d in &mut candidates {
            check_correctness(task, d, baseline_model_id, executor, checker)?;
            evaluate_coherence(d, &task.text, judge)?;
            score_decomposition(d, w)?;
        }
        let chosen = select_best(&candidates)?.clone();
        entries.push(DecompDatasetEntry {
            task_id: task.task_id.clone(),
            task_text: task.text.clone(),
            rejected_count: candidates.len() - 1,
            chosen,
        });
    }
    Ok(entries)
}

/// Wire format for one dataset line; field order is the file format.
#[derive(Debug, Serialize, Deserialize)]
struct DecompRecord<'a> {
    task_id: &'a str,
    task: &'a str,
    subtasks: Vec<&'a str>,
    k: usize,
    tokens_total: u64,
    coe_pairs: u32,
    correctness: u8,
    score: f64,
    weights: ScoreWeights,
}

pub fn write_decomp_dataset(
    entries: &[DecompDatasetEntry],
    w: ScoreWeights,
    out: &mut dyn Write,
) -> Result<()> {
    for e in entries {
        let d = &e.chosen;
        let rec = DecompRecord {
            task_id: &e.task_id,
            task: &e.task_text,
            subtasks: d.subtasks.iter().map(|s| s.text.as_str()).collect(),
            k: d.k(),
            tokens_total: d.tokens_total().unwrap_or(0),
            coe_pairs: d.coe_pairs.unwrap_or(0),
            correctness: u8::from(d.correctness == Some(true)),
            score: d.score.unwrap_or(f64::NAN),
            weights: w,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
