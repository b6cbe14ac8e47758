//! End-to-end routed workflow: decompose, allocate, execute the chain
//! strictly in order with optional procedural review of weak-model steps
//! by a designated strong model, integrate the final answer, and reduce
//! traces into evaluation metrics.
//!
//! # Example
//!
//! ```
//! use model_router::exec::{ExactMatchChecker, LastStepIntegrator};
//! use model_router::orchestrate::{compute_metrics, route_task, PrmConfig, UniformAllocator};
//! use model_router::pool::ModelPool;
//! use model_router::sim::{gen_tasks, DifficultyDist, SimMode, SimWorld};
//!
//! let config = std::fs::read_to_string(
//!     concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/pool9.toml"),
//! ).unwrap();
//! let pool = ModelPool::load(&config).unwrap();
//! let tasks = gen_tasks(3, 10, (1, 3), DifficultyDist::Uniform);
//! let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
//!
//! let traces: Vec<_> = tasks
//!     .iter()
//!     .map(|t| {
//!         route_task(
//!             &SimWorld::task_record(t),
//!             &world,                     // decomposer
//!             &UniformAllocator(8),       // send everything to the top model
//!             &world,                     // executor
//!             &ExactMatchChecker,
//!             &LastStepIntegrator,
//!             &pool,
//!             &PrmConfig::disabled(),
//!         )
//!         .unwrap()
//!     })
//!     .collect();
//!
//! let report = compute_metrics(&traces, None).unwrap();
//! assert_eq!(report.acc, 1.0); // the top model solves every deterministic task
//! assert!(report.c_api_cents > 0.0);
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocDatasetEntry, AllocationScheme, Bucket, TokenProbSource};
use crate::decomp::{Decomposition, Subtask};
use crate::error::{Error, Result};
use crate::exec::{
    AnswerChecker, Integrator, StepExecutor, StepInput, TaskRecord, FAILURE_MARKER,
};
use crate::grpo::{FeatureVector, PolicyParams};
use crate::pool::{usage_cost, Cost, ModelPool, TokenUsage};

/// Procedural review: outputs of models below the threshold capability are
/// checked (and if judged wrong, regenerated) by the strong model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrmConfig {
    pub enabled: bool,
    pub strong_model_id: usize,
    pub threshold_model_id: usize,
}

impl PrmConfig {
    pub fn disabled() -> Self {
        PrmConfig { enabled: false, strong_model_id: 0, threshold_model_id: 0 }
    }

    pub fn enabled(strong_model_id: usize, threshold_model_id: usize) -> Self {
        PrmConfig { enabled: true, strong_model_id, threshold_model_id }
    }

    pub fn validate(&self, pool: &ModelPool) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.strong_model_id >= pool.len() || self.threshold_model_id >= pool.len() {
            return Err(Error::InvalidPoolConfig(format!(
                "PRM model ids {}/{} out of range for a {}-model pool",
                self.strong_model_id,
                self.threshold_model_id,
                pool.len()
            )));
        }
        if pool.capability(self.strong_model_id) < pool.capability(self.threshold_model_id) {
            return Err(Error::InvalidPoolConfig(
                "PRM strong model is weaker than the threshold model".into(),
            ));
        }
        Ok(())
    }
}

/// Maps a decomposed task to one model id per subtask.
pub trait AllocatorPolicy {
    fn assign(&self, task: &TaskRecord, decomposition: &Decomposition) -> Result<Vec<usize>>;
}

/// Every subtask goes to one fixed model.
pub struct UniformAllocator(pub usize);

impl AllocatorPolicy for UniformAllocator {
    fn assign(&self, _task: &TaskRecord, decomposition: &Decomposition) -> Result<Vec<usize>> {
        Ok(vec![self.0; decomposition.k()])
    }
}

/// A precomputed assignment (e.g. a grouped-search result).
pub struct FixedSchemeAllocator(pub Vec<usize>);

impl AllocatorPolicy for FixedSchemeAllocator {
    fn assign(&self, _task: &TaskRecord, decomposition: &Decomposition) -> Result<Vec<usize>> {
        if self.0.len() != decomposition.k() {
            return Err(Error::LabelMismatch(format!(
                "fixed scheme has {} assignments for {} subtasks",
                self.0.len(),
                decomposition.k()
            )));
        }
        Ok(self.0.clone())
    }
}

/// Greedy (argmax) decoding of a trained categorical allocation policy over
/// per-subtask difficulty features, with an optional safety margin of extra
/// capability ranks.
pub struct PolicyAllocator<'a> {
    pub params: &'a PolicyParams,
    pub prob_source: &'a dyn TokenProbSource,
    pub pool: &'a ModelPool,
    pub alpha: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Extra capability ranks added to every assignment, clamped at the top.
    pub margin: usize,
}

impl<'a> PolicyAllocator<'a> {
    pub fn new(
        params: &'a PolicyParams,
        prob_source: &'a dyn TokenProbSource,
        pool: &'a ModelPool,
    ) -> Self {
        let p = crate::alloc::AllocSearchParams::default();
        PolicyAllocator {
            params,
            prob_source,
            pool,
            alpha: p.alpha,
            tau1: p.tau1,
            tau2: p.tau2,
            margin: 0,
        }
    }

    pub fn features(&self, task: &TaskRecord, subtask: &Subtask, k: usize) -> Result<(Vec<f64>, f64, Bucket)> {
        let est = crate::alloc::estimate_and_bucket(
            task, subtask, self.prob_source, self.alpha, self.tau1, self.tau2,
        )?;
        let x = FeatureVector::for_subtask(
            est.quantile_value,
            est.bucket,
            subtask.index,
            k,
            subtask.text.len(),
        )
        .to_vec();
        Ok((x, est.quantile_value, est.bucket))
    }
}

impl AllocatorPolicy for PolicyAllocator<'_> {
    fn assign(&self, task: &TaskRecord, decomposition: &Decomposition) -> Result<Vec<usize>> {
        let k = decomposition.k();
        decomposition
            .subtasks
            .iter()
            .map(|s| {
                let (x, _, _) = self.features(task, s, k)?;
                let raw = self.params.argmax(&x).min(self.pool.len() - 1);
                Ok((raw + self.margin).min(self.pool.len() - 1))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub model_id: usize,
    pub raw_result: String,
    pub prm_applied: bool,
    /// Strong model was needed but unavailable; raw result passed through.
    pub prm_passthrough: bool,
    pub final_result: String,
    pub usage: TokenUsage,
    pub prm_usage: Option<TokenUsage>,
    pub latency_ms: u64,
}

/// Full record of one routed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub task_id: String,
    pub decomposition: Decomposition,
    pub scheme: AllocationScheme,
    pub step_results: Vec<StepResult>,
    pub final_answer: String,
    pub acc: bool,
    /// Exact total including PRM calls, in micro-cents.
    pub cost_microcents: u64,
    /// PRM share of the total, ledgered separately.
    pub prm_cost_microcents: u64,
    pub cost_cents: f64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmOutcome {
    pub final_result: String,
    pub applied: bool,
    pub passthrough: bool,
    pub usage: Option<TokenUsage>,
    pub latency_ms: u64,
}

/// One judge-then-regenerate pass (Eq. 5): below-threshold steps are rerun
/// on the strong model; a differing strong answer replaces the raw result.
/// Strong-model failure passes the raw result through, flagged.
pub fn prm_verify(
    task: &TaskRecord,
    subtask: &Subtask,
    raw_result: &str,
    input: &StepInput,
    assigned_model: usize,
    prm: &PrmConfig,
    strong_executor: &dyn StepExecutor,
    pool: &ModelPool,
) -> PrmOutcome {
    let unchanged = PrmOutcome {
        final_result: raw_result.to_string(),
        applied: false,
        passthrough: false,
        usage: None,
        latency_ms: 0,
    };
    if !prm.enabled
        || pool.capability(assigned_model) >= pool.capability(prm.threshold_model_id)
    {
        return unchanged;
    }
    match strong_executor.execute(task, subtask, prm.strong_model_id, input) {
        Ok(strong) if strong.content != FAILURE_MARKER => {
            let corrected = strong.content != raw_result;
            PrmOutcome {
                final_result: if corrected {
                    strong.content
                } else {
                    raw_result.to_string()
                },
                applied: true,
                passthrough: false,
                usage: Some(strong.usage),
                latency_ms: strong.latency_ms,
            }
        }
        Ok(strong) => PrmOutcome {
            // the strong model ran (and is billed) but produced nothing
            // usable; keep the raw result rather than inject its failure
            final_result: raw_result.to_string(),
            applied: true,
            passthrough: true,
            usage: Some(strong.usage),
            latency_ms: strong.latency_ms,
        },
        Err(_) => PrmOutcome {
            final_result: raw_result.to_string(),
            applied: true,
            passthrough: true,
            usage: None,
            latency_ms: 0,
        },
    }
}

/// Execute one task end to end: decompose, allocate, run the chain in
/// order feeding each (post-review) output forward, integrate, check.
/// A failed step propagates the failure marker; downstream steps still run
/// and the ledger bills them.
#[allow(clippy::too_many_arguments)]
pub fn route_task(
    task: &TaskRecord,
    decomposer: &dyn crate::alloc::Decomposer,
    allocator: &dyn AllocatorPolicy,
    executor: &dyn StepExecutor,
    checker: &dyn AnswerChecker,
    integrator: &dyn Integrator,
    pool: &ModelPool,
    prm: &PrmConfig,
) -> Result<RoutingTrace> {
    prm.validate(pool)?;
    let decomposition = decomposer.decompose(task)?;
    let assignments = allocator.assign(task, &decomposition)?;
    if assignments.len() != decomposition.k() {
        return Err(Error::LabelMismatch(format!(
            "{} assignments for {} subtasks",
            assignments.len(),
            decomposition.k()
        )));
    }

    let mut step_results = Vec::with_capacity(decomposition.k());
    let mut input = StepInput::TaskOnly;
    let mut cost = Cost::ZERO;
    let mut prm_cost = Cost::ZERO;
    let mut latency_ms = 0u64;

    for (subtask, &model_id) in decomposition.subtasks.iter().zip(&assignments) {
        let (raw_result, usage, step_latency) = match executor.execute(task, subtask, model_id, &input)
        {
            Ok(out) => (out.content, out.usage, out.latency_ms),
            Err(_) => (FAILURE_MARKER.to_string(), TokenUsage::default(), 0),
        };
        cost += usage_cost(usage, pool.get(model_id));
        latency_ms += step_latency;

        let review = prm_verify(task, subtask, &raw_result, &input, model_id, prm, executor, pool);
        if let Some(u) = review.usage {
            let c = usage_cost(u, pool.get(prm.strong_model_id));
            cost += c;
            prm_cost += c;
        }
        latency_ms += review.latency_ms;

        input = if review.final_result == FAILURE_MARKER {
            StepInput::Failed
        } else {
            StepInput::Previous(review.final_result.clone())
        };
        step_results.push(StepResult {
            model_id,
            raw_result,
            prm_applied: review.applied,
            prm_passthrough: review.passthrough,
            final_result: review.final_result,
            usage,
            prm_usage: review.usage,
            latency_ms: step_latency + review.latency_ms,
        });
    }

    let finals: Vec<String> = step_results.iter().map(|s| s.final_result.clone()).collect();
    let final_answer = integrator.integrate(task, &finals);
    let any_failed = finals.iter().any(|f| f == FAILURE_MARKER);
    let acc = !any_failed && checker.accepts(task, &final_answer);

    let scheme = AllocationScheme {
        task_id: task.task_id.clone(),
        assignments,
        acc: Some(acc),
        cost: Some(cost),
        iteration: 0,
    };
    Ok(RoutingTrace {
        task_id: task.task_id.clone(),
        decomposition,
        scheme,
        step_results,
        final_answer,
        acc,
        cost_microcents: cost.microcents(),
        prm_cost_microcents: prm_cost.microcents(),
        cost_cents: cost.cents(),
        latency_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// Mean API cost per task, US cents.
    pub c_api_cents: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    /// Correctness rate over uniformly-routed (baseline) traces; absent
    /// when no trace was uniformly routed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
    pub n_tasks: usize,
}

/// Reduce traces into the evaluation metrics. Labels (when given) pair
/// with traces by task id; a paired trace must have the same subtask count.
pub fn compute_metrics(
    traces: &[RoutingTrace],
    labels: Option<&[AllocDatasetEntry]>,
) -> Result<MetricsReport> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let n = traces.len();
    let acc = traces.iter().filter(|t| t.acc).count() as f64 / n as f64;
    let total: Cost = traces.iter().map(|t| Cost(t.cost_microcents)).sum();
    let c_api_cents = total.cents() / n as f64;

    let mae = match labels {
        None => None,
        Some(labels) => {
            let mut abs_sum = 0.0;
            let mut count = 0usize;
            for t in traces {
                let Some(entry) = labels.iter().find(|l| l.task_id == t.task_id) else {
                    continue;
                };
                if entry.label_assignments.len() != t.scheme.assignments.len() {
                    return Err(Error::LabelMismatch(format!(
                        "task {}: {} labels for {} subtasks",
                        t.task_id,
                        entry.label_assignments.len(),
                        t.scheme.assignments.len()
                    )));
                }
                for (&p, &l) in t.scheme.assignments.iter().zip(&entry.label_assignments) {
                    abs_sum += (p as f64 - l as f64).abs();
                    count += 1;
                }
            }
            if count == 0 {
                None
            } else {
                Some(abs_sum / count as f64)
            }
        }
    };

    let uniform: Vec<&RoutingTrace> = traces
        .iter()
        .filter(|t| t.scheme.assignments.windows(2).all(|w| w[0] == w[1]))
        .collect();
    let c_d = if uniform.is_empty() {
        None
    } else {
        Some(uniform.iter().filter(|t| t.acc).count() as f64 / uniform.len() as f64)
    };

    let scored: Vec<f64> = traces
        .iter()
        .filter_map(|t| t.decomposition.score)
        .collect();
    let mean_score = if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    };

    Ok(MetricsReport { acc, c_api_cents, mae, c_d, mean_score, n_tasks: n })
}

pub fn write_traces(traces: &[RoutingTrace], out: &mut dyn Write) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut *out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces(input: impl std::io::BufRead) -> Result<Vec<RoutingTrace>> {
    let mut traces = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line)?);
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{ExactMatchChecker, LastStepIntegrator};
    use crate::sim::{gen_tasks, DifficultyDist, SimMode, SimWorld};
    use crate::testutil::{free_pool, priced_pool9};

    fn route_sim(
        world: &SimWorld,
        task: &TaskRecord,
        allocator: &dyn AllocatorPolicy,
        prm: &PrmConfig,
    ) -> RoutingTrace {
        route_task(
            task,
            world,
            allocator,
            world,
            &ExactMatchChecker,
            &LastStepIntegrator,
            &world.pool,
            prm,
        )
        .unwrap()
    }

    #[test]
    fn all_top_scheme_solves_and_bills_exactly() {
        let pool = priced_pool9();
        let tasks = gen_tasks(41, 10, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
        for t in &tasks {
            let record = SimWorld::task_record(t);
            let trace = route_sim(&world, &record, &UniformAllocator(8), &PrmConfig::disabled());
            assert!(trace.acc);
            assert_eq!(trace.step_results.len(), t.k());
            let expected: Cost = t
                .token_profile
                .iter()
                .map(|&(i, o)| usage_cost(TokenUsage::new(i, o), pool.get(8)))
                .sum();
            assert_eq!(trace.cost_microcents, expected.microcents());
            assert_eq!(trace.prm_cost_microcents, 0);
        }
    }

    #[test]
    fn trace_cost_is_exact_step_sum() {
        let pool = priced_pool9();
        let tasks = gen_tasks(43, 20, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
        let prm = PrmConfig::enabled(8, 6);
        for t in &tasks {
            let record = SimWorld::task_record(t);
            let trace = route_sim(&world, &record, &UniformAllocator(2), &prm);
            let mut expected = Cost::ZERO;
            let mut prm_expected = Cost::ZERO;
            for s in &trace.step_results {
                expected += usage_cost(s.usage, pool.get(s.model_id));
                if let Some(u) = s.prm_usage {
                    expected += usage_cost(u, pool.get(prm.strong_model_id));
                    prm_expected += usage_cost(u, pool.get(prm.strong_model_id));
                }
            }
            assert_eq!(trace.cost_microcents, expected.microcents());
            assert_eq!(trace.prm_cost_microcents, prm_expected.microcents());
            assert_eq!(trace.cost_cents, expected.cents());
        }
    }

    #[test]
    fn failed_step_forces_zero_acc_but_still_bills_downstream() {
        let pool = priced_pool9();
        let tasks = gen_tasks(47, 1, (3, 3), DifficultyDist::Point(0.9));
        let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
        let record = SimWorld::task_record(&tasks[0]);
        // model 0 (capability 0) fails difficulty 0.9 at every step
        let trace = route_sim(&world, &record, &UniformAllocator(0), &PrmConfig::disabled());
        assert!(!trace.acc);
        assert_eq!(trace.step_results.len(), 3);
        assert!(trace.step_results.iter().all(|s| s.raw_result == FAILURE_MARKER));
        // free model: zero cost, but every step ran
        assert_eq!(trace.cost_microcents, 0);
    }

    #[test]
    fn prm_rescues_weak_assignments() {
        let pool = priced_pool9();
        let tasks = gen_tasks(53, 20, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
        // threshold at the pool top: PRM reviews everything below model 8
        let prm = PrmConfig::enabled(8, 8);
        for t in &tasks {
            let record = SimWorld::task_record(t);
            let trace = route_sim(&world, &record, &UniformAllocator(0), &prm);
            assert!(trace.acc, "strong model must rescue every step");
            for s in &trace.step_results {
                assert!(s.prm_applied);
                assert!(!s.prm_passthrough);
            }
            assert!(trace.prm_cost_microcents > 0);
        }
    }

    #[test]
    fn prm_never_decreases_accuracy() {
        let pool = free_pool(9);
        let tasks = gen_tasks(59, 100, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 0);
        let prm = PrmConfig::enabled(8, 5);
        for t in &tasks {
            let record = SimWorld::task_record(t);
            for model in [0, 2, 4, 6] {
                let off = route_sim(&world, &record, &UniformAllocator(model), &PrmConfig::disabled());
                let on = route_sim(&world, &record, &UniformAllocator(model), &prm);
                assert!(u8::from(on.acc) >= u8::from(off.acc));
            }
        }
    }

    #[test]
    fn prm_skips_at_or_above_threshold() {
        let pool = priced_pool9();
        let tasks = gen_tasks(61, 5, (2, 2), DifficultyDist::Point(0.1));
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 0);
        // threshold at the pool minimum: nothing is below it
        let prm = PrmConfig::enabled(8, 0);
        for t in &tasks {
            let record = SimWorld::task_record(t);
            let trace = route_sim(&world, &record, &UniformAllocator(3), &prm);
            assert!(trace.step_results.iter().all(|s| !s.prm_applied));
            assert_eq!(trace.prm_cost_microcents, 0);
        }
    }

    #[test]
    fn prm_config_validation() {
        let pool = priced_pool9();
        assert!(PrmConfig::enabled(8, 5).validate(&pool).is_ok());
        assert!(PrmConfig::enabled(3, 5).validate(&pool).is_err());
        assert!(PrmConfig::enabled(9, 5).validate(&pool).is_err());
        assert!(PrmConfig::disabled().validate(&pool).is_ok());
    }

    #[test]
    fn metrics_mae_fixtures() {
        let pool = priced_pool9();
        let tasks = gen_tasks(67, 2, (2, 2), DifficultyDist::Point(0.2));
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 0);
        let mk = |t: &crate::sim::SimTask, scheme: Vec<usize>| {
            let record = SimWorld::task_record(t);
            route_sim(&world, &record, &FixedSchemeAllocator(scheme), &PrmConfig::disabled())
        };
        let label = |t: &crate::sim::SimTask, labels: Vec<usize>| AllocDatasetEntry {
            task_id: t.task_id.clone(),
            subtasks: vec![String::new(); labels.len()],
            estimates: vec![],
            label_assignments: labels,
        };

        let traces = vec![mk(&tasks[0], vec![2, 4])];
        let labels = vec![label(&tasks[0], vec![3, 4])];
        let m = compute_metrics(&traces, Some(&labels)).unwrap();
        assert_eq!(m.mae, Some(0.5));

        let traces = vec![mk(&tasks[0], vec![0, 8])];
        let labels = vec![label(&tasks[0], vec![8, 0])];
        let m = compute_metrics(&traces, Some(&labels)).unwrap();
        assert_eq!(m.mae, Some(8.0));

        // subtask count mismatch is an error, not a skip
        let labels = vec![label(&tasks[0], vec![1])];
        assert!(matches!(
            compute_metrics(&traces, Some(&labels)),
            Err(Error::LabelMismatch(_))
        ));
    }

    #[test]
    fn metrics_acc_and_cost_arithmetic() {
        let pool = priced_pool9();
        let tasks = gen_tasks(71, 4, (1, 1), DifficultyDist::Point(0.2));
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 0);
        let mut traces: Vec<RoutingTrace> = tasks
            .iter()
            .map(|t| {
                let record = SimWorld::task_record(t);
                route_sim(&world, &record, &UniformAllocator(4), &PrmConfig::disabled())
            })
            .collect();
        // acc [1,0,1,1], costs [0,2,4,2] cents
        traces[1].acc = false;
        for (trace, cents) in traces.iter_mut().zip([0u64, 2, 4, 2]) {
            trace.cost_microcents = cents * 1_000_000;
        }
        let m = compute_metrics(&traces, None).unwrap();
        assert_eq!(m.acc, 0.75);
        assert_eq!(m.c_api_cents, 2.0);
        assert_eq!(m.n_tasks, 4);
        // uniform routing: c_d tracks acc
        assert_eq!(m.c_d, Some(0.75));
    }

    #[test]
    fn metrics_concatenation_is_weighted_mean() {
        let pool = priced_pool9();
        let tasks = gen_tasks(73, 9, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 0);
        let traces: Vec<RoutingTrace> = tasks
            .iter()
            .map(|t| {
                let record = SimWorld::task_record(t);
                route_sim(&world, &record, &UniformAllocator(5), &PrmConfig::disabled())
            })
            .collect();
        let (a, b) = traces.split_at(4);
        let ma = compute_metrics(a, None).unwrap();
        let mb = compute_metrics(b, None).unwrap();
        let whole = compute_metrics(&traces, None).unwrap();
        let wa = a.len() as f64 / traces.len() as f64;
        let wb = b.len() as f64 / traces.len() as f64;
        assert!((whole.acc - (wa * ma.acc + wb * mb.acc)).abs() < 1e-12);
        assert!((whole.c_api_cents - (wa * ma.c_api_cents + wb * mb.c_api_cents)).abs() < 1e-12);
    }

    #[test]
    fn metrics_empty_traces_rejected() {
        assert!(matches!(compute_metrics(&[], None), Err(Error::EmptyTraces)));
    }

    #[test]
    fn traces_roundtrip_jsonl() {
        let pool = priced_pool9();
        let tasks = gen_tasks(79, 6, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 0);
        let prm = PrmConfig::enabled(8, 4);
        let traces: Vec<RoutingTrace> = tasks
            .iter()
            .map(|t| {
                let record = SimWorld::task_record(t);
                route_sim(&world, &record, &UniformAllocator(2), &prm)
            })
            .collect();
        let mut buf = Vec::new();
        write_traces(&traces, &mut buf).unwrap();
        let back = read_traces(buf.as_slice()).unwrap();
        assert_eq!(traces, back);

        let mut buf2 = Vec::new();
        write_traces(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2, "serialization is byte-stable");
    }

    #[test]
    fn policy_allocator_routes_by_difficulty() {
        let pool = priced_pool9();
        let tasks = gen_tasks(83, 30, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
        // hand-built policy: huge negative weight on the quantile feature for
        // high ids so easy subtasks (high quantile) go to cheap models
        let mut params = PolicyParams::zeros(9, 7);
        for a in 0..9 {
            params.weights[a * 7] = -40.0 * a as f64; // quantile
            params.weights[a * 7 + 6] = 36.0 * a as f64; // bias
        }
        let alloc = PolicyAllocator::new(&params, &world, &pool);
        for t in &tasks {
            let record = SimWorld::task_record(t);
            let identity = SimWorld::identity_decomposition(t);
            let a = alloc.assign(&record, &identity).unwrap();
            assert_eq!(a.len(), t.k());
            // harder segment never gets a strictly weaker model than an
            // easier one within the same task
            for i in 0..t.k() {
                for j in 0..t.k() {
                    if t.latent_difficulties[i] > t.latent_difficulties[j] + 0.1 {
                        assert!(a[i] >= a[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn margin_shifts_assignments_up() {
        let pool = priced_pool9();
        let tasks = gen_tasks(89, 10, (2, 2), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
        let params = PolicyParams::zeros(9, 7);
        let base = PolicyAllocator::new(&params, &world, &pool);
        let shifted = PolicyAllocator { margin: 2, ..PolicyAllocator::new(&params, &world, &pool) };
        for t in &tasks {
            let record = SimWorld::task_record(t);
            let identity = SimWorld::identity_decomposition(t);
            let a = base.assign(&record, &identity).unwrap();
            let b = shifted.assign(&record, &identity).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(*y, (*x + 2).min(8));
            }
        }
    }
}
