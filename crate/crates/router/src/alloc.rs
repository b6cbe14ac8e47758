//! Allocation search: subtask difficulty estimation from token
//! probabilities, bucketing against thresholds, the initial medium-model
//! scheme, and the iterative grouped search for the cheapest correct
//! assignment under a hard iteration cap.
//!
//! # Example
//!
//! ```
//! use model_router::alloc::{
//!     estimate_and_bucket, grouped_search, AllocSearchParams, Bucket, ChainEvaluator,
//! };
//! use model_router::exec::ExactMatchChecker;
//! use model_router::pool::{partition_groups, ModelPool};
//! use model_router::sim::{gen_tasks, DifficultyDist, SimMode, SimWorld};
//!
//! let config = std::fs::read_to_string(
//!     concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/pool9.toml"),
//! ).unwrap();
//! let pool = ModelPool::load(&config).unwrap();
//! let tasks = gen_tasks(11, 1, (2, 2), DifficultyDist::Uniform);
//! let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
//!
//! let record = SimWorld::task_record(&tasks[0]);
//! let decomposition = SimWorld::identity_decomposition(&tasks[0]);
//! let p = AllocSearchParams::default();
//! let buckets: Vec<Bucket> = decomposition
//!     .subtasks
//!     .iter()
//!     .map(|s| {
//!         estimate_and_bucket(&record, s, &world, p.alpha, p.tau1, p.tau2)
//!             .unwrap()
//!             .bucket
//!     })
//!     .collect();
//!
//! let evaluator = ChainEvaluator { executor: &world, checker: &ExactMatchChecker, pool: &pool };
//! let grouped = partition_groups(&pool).unwrap();
//! let trace = grouped_search(
//!     &record, &decomposition.subtasks, &buckets, &grouped, &pool, &evaluator, p.limit,
//! ).unwrap();
//!
//! // the deterministic world is always solvable, so the search finds a correct scheme
//! assert_eq!(trace.result.acc, Some(true));
//! assert!(trace.schemes.len() <= p.limit);
//! ```

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decomp::{Decomposition, Subtask};
use crate::error::{Error, Result};
use crate::exec::{run_chain, AnswerChecker, Integrator, LastStepIntegrator, StepExecutor, TaskRecord};
use crate::pool::{medium_model, usage_cost, Cost, GroupedPool, ModelPool, Tier};

/// Supplies per-token probabilities for a subtask, from which difficulty is
/// estimated.
pub trait TokenProbSource {
    fn token_probs(&self, task: &TaskRecord, subtask: &Subtask) -> Result<Vec<f64>>;
}

/// Maps a task to its subtask chain.
pub trait Decomposer {
    fn decompose(&self, task: &TaskRecord) -> Result<Decomposition>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "G_E")]
    Easy,
    #[serde(rename = "G_M")]
    Medium,
    #[serde(rename = "G_H")]
    Hard,
}

impl Bucket {
    pub fn tier(self) -> Tier {
        match self {
            Bucket::Easy => Tier::Slm,
            Bucket::Medium => Tier::Mlm,
            Bucket::Hard => Tier::Llm,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Bucket::Easy => [1.0, 0.0, 0.0],
            Bucket::Medium => [0.0, 1.0, 0.0],
            Bucket::Hard => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEstimate {
    pub subtask_index: usize,
    pub alpha: f64,
    pub quantile_value: f64,
    pub bucket: Bucket,
}

/// Nearest-rank alpha-quantile of the per-token probabilities. Higher values
/// mean the probe model is more confident, i.e. the subtask is easier.
pub fn estimate_difficulty(probs: &[f64], alpha: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyProbSequence);
    }
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0,1)");
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are finite"));
    let rank = (alpha * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank - 1])
}

/// Boundary values fall to the harder bucket.
pub fn bucket_difficulty(value: f64, tau1: f64, tau2: f64) -> Result<Bucket> {
    if !(0.0..=1.0).contains(&tau1) || tau2 < 0.0 || tau2 >= tau1 {
        return Err(Error::InvalidThresholds { tau1, tau2 });
    }
    Ok(if value > tau1 {
        Bucket::Easy
    } else if value > tau2 {
        Bucket::Medium
    } else {
        Bucket::Hard
    })
}

pub fn estimate_and_bucket(
    task: &TaskRecord,
    subtask: &Subtask,
    source: &dyn TokenProbSource,
    alpha: f64,
    tau1: f64,
    tau2: f64,
) -> Result<DifficultyEstimate> {
    let probs = source.token_probs(task, subtask)?;
    let quantile_value = estimate_difficulty(&probs, alpha)?;
    Ok(DifficultyEstimate {
        subtask_index: subtask.index,
        alpha,
        quantile_value,
        bucket: bucket_difficulty(quantile_value, tau1, tau2)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationScheme {
    pub task_id: String,
    /// One model id per subtask.
    pub assignments: Vec<usize>,
    pub acc: Option<bool>,
    pub cost: Option<Cost>,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct SearchTrace {
    pub schemes: Vec<AllocationScheme>,
    pub result: AllocationScheme,
    /// True when the search hit the iteration cap or ran out of capability
    /// headroom without finding a correct scheme.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOutcome {
    pub acc: bool,
    pub cost: Cost,
    pub first_failing: Option<usize>,
}

/// Evaluates a full assignment scheme end to end.
pub trait SchemeEvaluator {
    fn evaluate(
        &self,
        task: &TaskRecord,
        subtasks: &[Subtask],
        assignments: &[usize],
    ) -> Result<SchemeOutcome>;
}

/// Scheme evaluation by actually running the chain through a step executor
/// and pricing the usage against the pool.
pub struct ChainEvaluator<'a> {
    pub executor: &'a dyn StepExecutor,
    pub checker: &'a dyn AnswerChecker,
    pub pool: &'a ModelPool,
}

impl SchemeEvaluator for ChainEvaluator<'_> {
    fn evaluate(
        &self,
        task: &TaskRecord,
        subtasks: &[Subtask],
        assignments: &[usize],
    ) -> Result<SchemeOutcome> {
        let steps = run_chain(task, subtasks, assignments, self.executor);
        let cost: Cost = steps
            .iter()
            .map(|s| usage_cost(s.usage, self.pool.get(s.model_id)))
            .sum();
        let first_failing = steps.iter().position(|s| s.failed);
        let contents: Vec<String> = steps.iter().map(|s| s.content.clone()).collect();
        let answer = LastStepIntegrator.integrate(task, &contents);
        let acc = first_failing.is_none() && self.checker.accepts(task, &answer);
        Ok(SchemeOutcome { acc, cost, first_failing })
    }
}

fn position_in_group(group: &[crate::pool::ModelSpec], id: usize) -> usize {
    group
        .iter()
        .position(|m| m.id == id)
        .expect("assignment belongs to its tier's group")
}

/// Initial scheme: each subtask gets the medium-capacity model of the group
/// its difficulty bucket maps to.
pub fn initial_scheme(
    task_id: &str,
    buckets: &[Bucket],
    grouped: &GroupedPool,
) -> AllocationScheme {
    let assignments = buckets
        .iter()
        .map(|b| {
            medium_model(grouped.group(b.tier()))
                .expect("groups are non-empty")
                .id
        })
        .collect();
    AllocationScheme {
        task_id: task_id.to_string(),
        assignments,
        acc: None,
        cost: None,
        iteration: 0,
    }
}

/// Iterative grouped search. Within-group phases step every assignment one
/// model down (on success) or up (on failure) inside its current tier's
/// group. When within-group moves are pinned at the group boundary, the
/// between-group phase demotes floor-pinned subtasks one tier (on persistent
/// success) or promotes the unresolved suffix one tier (on persistent
/// failure), re-entering the within-group phase. Terminates on convergence,
/// a revisited scheme, the iteration cap, or full capability exhaustion.
/// The result is the cheapest correct scheme evaluated, else the last one.
pub fn grouped_search(
    task: &TaskRecord,
    subtasks: &[Subtask],
    buckets: &[Bucket],
    grouped: &GroupedPool,
    pool: &ModelPool,
    evaluator: &dyn SchemeEvaluator,
    limit: usize,
) -> Result<SearchTrace> {
    if limit == 0 || limit > 20 {
        return Err(Error::InvalidLimit(limit));
    }
    let top_id = pool.len() - 1;
    let mut tiers: Vec<Tier> = buckets.iter().map(|b| b.tier()).collect();
    let mut current = initial_scheme(&task.task_id, buckets, grouped).assignments;

    let mut schemes: Vec<AllocationScheme> = Vec::new();
    let mut visited: HashSet<Vec<usize>> = HashSet::new();
    let mut hit_limit = false;

    loop {
        let outcome = match evaluator.evaluate(task, subtasks, &current) {
            Ok(o) => o,
            // evaluator failure marks the scheme incorrect, search continues
            Err(_) => SchemeOutcome { acc: false, cost: Cost::ZERO, first_failing: Some(0) },
        };
        visited.insert(current.clone());
        schemes.push(AllocationScheme {
            task_id: task.task_id.clone(),
            assignments: current.clone(),
            acc: Some(outcome.acc),
            cost: Some(outcome.cost),
            iteration: schemes.len(),
        });

        if schemes.len() >= limit {
            hit_limit = true;
            break;
        }
        if !outcome.acc && current.iter().all(|&a| a == top_id) {
            break; // maximum capability models everywhere, still failing
        }

        let mut next = current.clone();
        let mut next_tiers = tiers.clone();
        if outcome.acc {
            // within-group downward step
            let mut moved = false;
            for (i, a) in next.iter_mut().enumerate() {
                let group = grouped.group(tiers[i]);
                let pos = position_in_group(group, *a);
                if pos > 0 {
                    *a = group[pos - 1].id;
                    moved = true;
                }
            }
            if !moved {
                // between-group demotion for floor-pinned subtasks
                for (i, a) in next.iter_mut().enumerate() {
                    if let Some(lower) = tiers[i].down() {
                        next_tiers[i] = lower;
                        *a = medium_model(grouped.group(lower)).expect("non-empty").id;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        } else {
            // within-group upward step
            let mut moved = false;
            for (i, a) in next.iter_mut().enumerate() {
                let group = grouped.group(tiers[i]);
                let pos = position_in_group(group, *a);
                if pos + 1 < group.len() {
                    *a = group[pos + 1].id;
                    moved = true;
                }
            }
            if !moved {
                // promote the unresolved suffix one tier
                let from = outcome.first_failing.unwrap_or(0);
                for i in from..next.len() {
                    if let Some(upper) = tiers[i].up() {
                        next_tiers[i] = upper;
                        next[i] = medium_model(grouped.group(upper)).expect("non-empty").id;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }

        if visited.contains(&next) {
            break; // converged onto an already-evaluated scheme
        }
        current = next;
        tiers = next_tiers;
    }

    let result = schemes
        .iter()
        .filter(|s| s.acc == Some(true))
        .min_by_key(|s| s.cost.expect("evaluated schemes carry cost"))
        .unwrap_or_else(|| schemes.last().expect("at least one evaluation"))
        .clone();
    let exhausted = hit_limit || result.acc != Some(true);
    Ok(SearchTrace { schemes, result, exhausted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocDatasetEntry {
    pub task_id: String,
    pub subtasks: Vec<String>,
    pub estimates: Vec<DifficultyEstimate>,
    pub label_assignments: Vec<usize>,
}

pub struct AllocSearchParams {
    pub alpha: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub limit: usize,
}

impl Default for AllocSearchParams {
    /// Thresholds are not fixed by the method; chosen so a uniform difficulty
    /// distribution splits roughly into thirds.
    fn default() -> Self {
        AllocSearchParams { alpha: 0.5, tau1: 0.75, tau2: 0.45, limit: 20 }
    }
}

/// Search every task and keep only those that reached a correct scheme:
/// label quality over coverage.
pub fn build_alloc_dataset(
    tasks: &[TaskRecord],
    decomposer: &dyn Decomposer,
    prob_source: &dyn TokenProbSource,
    grouped: &GroupedPool,
    pool: &ModelPool,
    evaluator: &dyn SchemeEvaluator,
    params: &AllocSearchParams,
) -> Result<Vec<AllocDatasetEntry>> {
    let mut entries = Vec::new();
    for task in tasks {
        let decomposition = match decomposer.decompose(task) {
            Ok(d) => d,
            Err(e) => {
                eprintln!("decomposer failed on {}: {e}", task.task_id);
                continue;
            }
        };
        let mut estimates = Vec::with_capacity(decomposition.k());
        for s in &decomposition.subtasks {
            estimates.push(estimate_and_bucket(
                task,
                s,
                prob_source,
                params.alpha,
                params.tau1,
                params.tau2,
            )?);
        }
        let buckets: Vec<Bucket> = estimates.iter().map(|e| e.bucket).collect();
        let trace = grouped_search(
            task,
            &decomposition.subtasks,
            &buckets,
            grouped,
            pool,
            evaluator,
            params.limit,
        )?;
        if trace.result.acc != Some(true) {
            continue;
        }
        entries.push(AllocDatasetEntry {
            task_id: task.task_id.clone(),
            subtasks: decomposition.subtasks.iter().map(|s| s.text.clone()).collect(),
            estimates,
            label_assignments: trace.result.assignments,
        });
    }
    Ok(entries)
}

/// Wire format for one dataset line; field order is the file format.
#[derive(Debug, Serialize, Deserialize)]
struct AllocRecord {
    task_id: String,
    subtasks: Vec<String>,
    buckets: Vec<Bucket>,
    quantiles: Vec<f64>,
    labels: Vec<usize>,
}

pub fn write_alloc_dataset(entries: &[AllocDatasetEntry], out: &mut dyn Write) -> Result<()> {
    for e in entries {
        let rec = AllocRecord {
            task_id: e.task_id.clone(),
            subtasks: e.subtasks.clone(),
            buckets: e.estimates.iter().map(|d| d.bucket).collect(),
            quantiles: e.estimates.iter().map(|d| d.quantile_value).collect(),
            labels: e.label_assignments.clone(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_alloc_dataset(input: impl std::io::BufRead) -> Result<Vec<AllocDatasetEntry>> {
    let mut entries = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AllocRecord = serde_json::from_str(&line)?;
        let estimates = rec
            .buckets
            .iter()
            .zip(&rec.quantiles)
            .enumerate()
            .map(|(i, (&bucket, &quantile_value))| DifficultyEstimate {
                subtask_index: i,
                alpha: f64::NAN,
                quantile_value,
                bucket,
            })
            .collect();
        entries.push(AllocDatasetEntry {
            task_id: rec.task_id,
            subtasks: rec.subtasks,
            estimates,
            label_assignments: rec.labels,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExactMatchChecker;
    use crate::pool::partition_groups;
    use crate::testutil::{free_pool, priced_pool9};
    use crate::sim::{SimMode, SimTask, SimWorld};

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(estimate_difficulty(&[0.2, 0.5, 0.9], 0.5).unwrap(), 0.5);
        assert_eq!(estimate_difficulty(&[0.7, 0.7, 0.7, 0.7], 0.3).unwrap(), 0.7);
        // fixture: sorted [0.1, 0.3, 0.4, 0.8], alpha=0.25 -> rank ceil(1)=1 -> 0.1
        assert_eq!(estimate_difficulty(&[0.8, 0.1, 0.4, 0.3], 0.25).unwrap(), 0.1);
        // n=5, alpha=0.25 -> rank ceil(1.25)=2
        assert_eq!(
            estimate_difficulty(&[0.5, 0.1, 0.9, 0.3, 0.7], 0.25).unwrap(),
            0.3
        );
        assert!(matches!(
            estimate_difficulty(&[], 0.5),
            Err(Error::EmptyProbSequence)
        ));
    }

    #[test]
    fn bucket_boundaries_fall_hard() {
        assert_eq!(bucket_difficulty(0.9, 0.8, 0.4).unwrap(), Bucket::Easy);
        assert_eq!(bucket_difficulty(0.8, 0.8, 0.4).unwrap(), Bucket::Medium);
        assert_eq!(bucket_difficulty(0.4, 0.8, 0.4).unwrap(), Bucket::Hard);
        assert_eq!(bucket_difficulty(0.1, 0.8, 0.4).unwrap(), Bucket::Hard);
        assert!(matches!(
            bucket_difficulty(0.5, 0.4, 0.8),
            Err(Error::InvalidThresholds { .. })
        ));
    }

    #[test]
    fn initial_scheme_uses_group_medians() {
        let pool = free_pool(9);
        let grouped = partition_groups(&pool).unwrap();
        let s = initial_scheme("t", &[Bucket::Easy, Bucket::Hard], &grouped);
        assert_eq!(s.assignments, vec![1, 7]);
        assert_eq!(s.iteration, 0);

        let all_medium = initial_scheme("t", &[Bucket::Medium; 3], &grouped);
        assert_eq!(all_medium.assignments, vec![4, 4, 4]);

        let pool3 = free_pool(3);
        let grouped3 = partition_groups(&pool3).unwrap();
        let s3 = initial_scheme("t", &[Bucket::Easy, Bucket::Medium, Bucket::Hard], &grouped3);
        assert_eq!(s3.assignments, vec![0, 1, 2]);
    }

    fn world_with(difficulties: Vec<f64>) -> (SimWorld, TaskRecord) {
        let k = difficulties.len();
        let sim = SimTask {
            task_id: "fix".into(),
            latent_difficulties: difficulties,
            token_profile: vec![(300, 100); k],
        };
        let record = SimWorld::task_record(&sim);
        let world = SimWorld::new(vec![sim], priced_pool9(), SimMode::Deterministic, 0);
        (world, record)
    }

    #[test]
    fn grouped_search_finds_cheap_scheme() {
        // difficulties solvable by models >= {0, 6}
        let (world, task) = world_with(vec![0.0, 0.75]);
        let sim = world.sim_task("fix").unwrap();
        let d = SimWorld::identity_decomposition(sim);
        let grouped = partition_groups(&world.pool).unwrap();
        let evaluator = ChainEvaluator {
            executor: &world,
            checker: &ExactMatchChecker,
            pool: &world.pool,
        };
        let trace = grouped_search(
            &task,
            &d.subtasks,
            &[Bucket::Easy, Bucket::Hard],
            &grouped,
            &world.pool,
            &evaluator,
            20,
        )
        .unwrap();
        assert_eq!(trace.schemes[0].assignments, vec![1, 7]);
        assert_eq!(trace.result.assignments, vec![0, 6]);
        assert_eq!(trace.result.acc, Some(true));
        assert!(!trace.exhausted);
    }

    #[test]
    fn grouped_search_unsolvable_exhausts_at_ceiling() {
        let (world, task) = world_with(vec![1.5, 1.5]);
        let sim = world.sim_task("fix").unwrap();
        let d = SimWorld::identity_decomposition(sim);
        let grouped = partition_groups(&world.pool).unwrap();
        let evaluator = ChainEvaluator {
            executor: &world,
            checker: &ExactMatchChecker,
            pool: &world.pool,
        };
        let trace = grouped_search(
            &task,
            &d.subtasks,
            &[Bucket::Hard, Bucket::Hard],
            &grouped,
            &world.pool,
            &evaluator,
            20,
        )
        .unwrap();
        assert_eq!(trace.result.acc, Some(false));
        assert_eq!(trace.result.assignments, vec![8, 8]);
        assert!(trace.exhausted);
    }

    #[test]
    fn grouped_search_limit_one_evaluates_only_initial() {
        let (world, task) = world_with(vec![0.2]);
        let sim = world.sim_task("fix").unwrap();
        let d = SimWorld::identity_decomposition(sim);
        let grouped = partition_groups(&world.pool).unwrap();
        let evaluator = ChainEvaluator {
            executor: &world,
            checker: &ExactMatchChecker,
            pool: &world.pool,
        };
        let trace = grouped_search(
            &task,
            &d.subtasks,
            &[Bucket::Easy],
            &grouped,
            &world.pool,
            &evaluator,
            1,
        )
        .unwrap();
        assert_eq!(trace.schemes.len(), 1);
        assert_eq!(trace.schemes[0].assignments, vec![1]);
        assert!(trace.exhausted);
    }

    #[test]
    fn grouped_search_rejects_bad_limits() {
        let (world, task) = world_with(vec![0.2]);
        let sim = world.sim_task("fix").unwrap();
        let d = SimWorld::identity_decomposition(sim);
        let grouped = partition_groups(&world.pool).unwrap();
        let evaluator = ChainEvaluator {
            executor: &world,
            checker: &ExactMatchChecker,
            pool: &world.pool,
        };
        for bad in [0usize, 21] {
            assert!(matches!(
                grouped_search(
                    &task,
                    &d.subtasks,
                    &[Bucket::Easy],
                    &grouped,
                    &world.pool,
                    &evaluator,
                    bad
                ),
                Err(Error::InvalidLimit(_))
            ));
        }
    }

    #[test]
    fn grouped_search_never_beats_oracle_and_respects_monotonicity() {
        use crate::sim::{brute_force_optimal, gen_tasks, DifficultyDist};
        let pool = priced_pool9();
        let tasks = gen_tasks(17, 40, (1, 3), DifficultyDist::Uniform);
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 17);
        let grouped = partition_groups(&world.pool).unwrap();
        let evaluator = ChainEvaluator {
            executor: &world,
            checker: &ExactMatchChecker,
            pool: &world.pool,
        };
        let params = AllocSearchParams::default();
        for sim in &tasks {
            let record = SimWorld::task_record(sim);
            let d = SimWorld::identity_decomposition(sim);
            let buckets: Vec<Bucket> = d
                .subtasks
                .iter()
                .map(|s| {
                    estimate_and_bucket(&record, s, &world, params.alpha, params.tau1, params.tau2)
                        .unwrap()
                        .bucket
                })
                .collect();
            let trace = grouped_search(
                &record,
                &d.subtasks,
                &buckets,
                &grouped,
                &world.pool,
                &evaluator,
                20,
            )
            .unwrap();
            assert!(trace.schemes.len() <= 20);

            let usages: Vec<_> = d
                .subtasks
                .iter()
                .map(|s| world.subtask_usage(&sim.task_id, s).unwrap())
                .collect();
            let oracle =
                brute_force_optimal(&sim.latent_difficulties, &usages, &world.pool).unwrap();
            if oracle.acc {
                assert_eq!(trace.result.acc, Some(true), "task {}", sim.task_id);
                // never cheaper than the global optimum
                assert!(trace.result.cost.unwrap() >= oracle.cost);
                // never costlier than the all-top scheme
                let top_cost: Cost = usages
                    .iter()
                    .map(|&u| usage_cost(u, world.pool.top_model()))
                    .sum();
                assert!(trace.result.cost.unwrap() <= top_cost);
            }
        }
    }

    #[test]
    fn alloc_dataset_skips_unsolvable_and_reproduces() {
        use crate::sim::{gen_tasks, DifficultyDist};
        let pool = priced_pool9();
        let mut tasks = gen_tasks(23, 9, (1, 3), DifficultyDist::Uniform);
        tasks.push(SimTask {
            task_id: "impossible".into(),
            latent_difficulties: vec![2.0],
            token_profile: vec![(100, 50)],
        });
        let world = SimWorld::new(tasks.clone(), pool, SimMode::Deterministic, 23);
        let grouped = partition_groups(&world.pool).unwrap();
        let evaluator = ChainEvaluator {
            executor: &world,
            checker: &ExactMatchChecker,
            pool: &world.pool,
        };
        let records: Vec<TaskRecord> = tasks.iter().map(SimWorld::task_record).collect();
        let params = AllocSearchParams::default();
        let entries = build_alloc_dataset(
            &records, &world, &world, &grouped, &world.pool, &evaluator, &params,
        )
        .unwrap();
        assert_eq!(entries.len(), 9);
        assert!(entries.iter().all(|e| e.task_id != "impossible"));

        // idempotence: re-searching reproduces the labels
        let again = build_alloc_dataset(
            &records, &world, &world, &grouped, &world.pool, &evaluator, &params,
        )
        .unwrap();
        assert_eq!(entries, again);

        let empty = build_alloc_dataset(
            &[], &world, &world, &grouped, &world.pool, &evaluator, &params,
        )
        .unwrap();
        assert!(empty.is_empty());
    }
}
