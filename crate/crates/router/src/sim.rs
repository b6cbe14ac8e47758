//! Simulated environment: synthetic tasks with latent per-segment
//! difficulties, simulated model behavior over the capability-ranked pool,
//! a token-probability source for difficulty estimation, and the exhaustive
//! allocation oracle used by tests and training.
//!
//! All randomness flows from explicit seeds; there is no ambient entropy.
//!
//! # Example
//!
//! ```
//! use model_router::pool::{ModelPool, TokenUsage};
//! use model_router::sim::{brute_force_optimal, gen_tasks, DifficultyDist};
//!
//! let config = std::fs::read_to_string(
//!     concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/pool9.toml"),
//! ).unwrap();
//! let pool = ModelPool::load(&config).unwrap();
//!
//! let tasks = gen_tasks(7, 5, (1, 3), DifficultyDist::Uniform);
//! let t = &tasks[0];
//! let usages: Vec<TokenUsage> = t
//!     .token_profile
//!     .iter()
//!     .map(|&(p, c)| TokenUsage::new(p, c))
//!     .collect();
//!
//! // exhaustive oracle: cheapest correct assignment in the deterministic world
//! let oracle = brute_force_optimal(&t.latent_difficulties, &usages, &pool).unwrap();
//! assert!(oracle.acc);
//! assert_eq!(oracle.assignments.len(), t.k());
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{Decomposition, DecompositionGenerator, Subtask};
use crate::error::{Error, Result};
use crate::exec::{StepExecutor, StepInput, StepOutcome, TaskRecord, FAILURE_MARKER};
use crate::pool::{usage_cost, Cost, ModelPool, TokenUsage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    pub task_id: String,
    /// One latent difficulty in [0,1] per segment.
    pub latent_difficulties: Vec<f64>,
    /// Per-segment (prompt, completion) token counts.
    pub token_profile: Vec<(u64, u64)>,
}

impl SimTask {
    pub fn k(&self) -> usize {
        self.latent_difficulties.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DifficultyDist {
    Uniform,
    Point(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimMode {
    /// Correct iff capability >= difficulty (inclusive boundary).
    Deterministic,
    /// Correct with probability sigmoid(gamma * (capability - difficulty)).
    Sigmoid { gamma: f64 },
}

// FNV-1a; stable across builds, unlike the std hasher.
fn fnv1a(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for byte in p.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn str_key(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in s.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut all = vec![seed];
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(fnv1a(&all))
}

/// Reproducible synthetic task set.
pub fn gen_tasks(
    seed: u64,
    n: usize,
    k_range: (usize, usize),
    dist: DifficultyDist,
) -> Vec<SimTask> {
    assert!(k_range.0 >= 1 && k_range.0 <= k_range.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(k_range.0..=k_range.1);
            let latent_difficulties = (0..k)
                .map(|_| match dist {
                    DifficultyDist::Uniform => rng.gen_range(0.0..=1.0),
                    DifficultyDist::Point(v) => v,
                })
                .collect();
            let token_profile = (0..k)
                .map(|_| (rng.gen_range(200..600), rng.gen_range(50..300)))
                .collect();
            SimTask {
                task_id: format!("sim-{seed}-{i:05}"),
                latent_difficulties,
                token_profile,
            }
        })
        .collect()
}

fn subtask_text(task_id: &str, a: usize, b: usize) -> String {
    format!("span {a}-{b}: resolve segments {a} through {b} of task {task_id}")
}

/// Parse the segment span back out of a simulated subtask's text.
pub fn parse_span(text: &str) -> Option<(usize, usize)> {
    let rest = text.strip_prefix("span ")?;
    let (range, _) = rest.split_once(':')?;
    let (a, b) = range.split_once('-')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// The simulated world: implements the executor, checker-input, probability
/// source and decomposition-generator interfaces over a fixed task table.
pub struct SimWorld {
    tasks: BTreeMap<String, SimTask>,
    pub pool: ModelPool,
    pub mode: SimMode,
    pub seed: u64,
    /// Half-width of the uniform noise added to simulated token
    /// probabilities around 1 - difficulty.
    pub prob_noise: f64,
}

impl SimWorld {
    pub fn new(tasks: Vec<SimTask>, pool: ModelPool, mode: SimMode, seed: u64) -> Self {
        let tasks = tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect();
        SimWorld { tasks, pool, mode, seed, prob_noise: 0.02 }
    }

    pub fn tasks(&self) -> impl Iterator<Item = &SimTask> {
        self.tasks.values()
    }

    pub fn sim_task(&self, task_id: &str) -> Option<&SimTask> {
        self.tasks.get(task_id)
    }

    pub fn task_record(sim: &SimTask) -> TaskRecord {
        TaskRecord {
            task_id: sim.task_id.clone(),
            text: format!("simulated task {} with {} segments", sim.task_id, sim.k()),
            ground_truth: format!("solved:{}:{}", sim.task_id, sim.k() - 1),
            benchmark_tag: "sim".into(),
        }
    }

    /// One subtask per latent segment.
    pub fn identity_decomposition(sim: &SimTask) -> Decomposition {
        let subtasks = (0..sim.k())
            .map(|i| Subtask::new(i, subtask_text(&sim.task_id, i, i)))
            .collect();
        Decomposition::new(sim.task_id.clone(), subtasks)
    }

    /// Difficulty of a (possibly merged) subtask: the hardest covered segment.
    pub fn subtask_difficulty(&self, task_id: &str, subtask: &Subtask) -> Result<f64> {
        let sim = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::ExecutorFailure(format!("unknown sim task {task_id}")))?;
        let (a, b) = parse_span(&subtask.text)
            .ok_or_else(|| Error::ExecutorFailure(format!("unparseable subtask: {}", subtask.text)))?;
        if b >= sim.k() || a > b {
            return Err(Error::ExecutorFailure(format!("span {a}-{b} out of range")));
        }
        Ok(sim.latent_difficulties[a..=b]
            .iter()
            .cloned()
            .fold(0.0, f64::max))
    }

    pub fn subtask_usage(&self, task_id: &str, subtask: &Subtask) -> Result<TokenUsage> {
        let sim = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::ExecutorFailure(format!("unknown sim task {task_id}")))?;
        let (a, b) = parse_span(&subtask.text)
            .ok_or_else(|| Error::ExecutorFailure(format!("unparseable subtask: {}", subtask.text)))?;
        let (pin, pout) = sim.token_profile[a..=b]
            .iter()
            .fold((0, 0), |(i, o), &(pi, po)| (i + pi, o + po));
        Ok(TokenUsage::new(pin, pout))
    }

    fn step_correct(&self, task_id: &str, span: (usize, usize), model_id: usize, d: f64) -> bool {
        self.step_correct_with_nonce(task_id, span, model_id, d, 0)
    }

    /// Correctness draw with an explicit nonce so repeated rollouts of the
    /// same (task, span, model) triple decorrelate under the sigmoid mode.
    pub fn step_correct_with_nonce(
        &self,
        task_id: &str,
        span: (usize, usize),
        model_id: usize,
        d: f64,
        nonce: u64,
    ) -> bool {
        let cap = self.pool.capability(model_id);
        match self.mode {
            SimMode::Deterministic => cap >= d,
            SimMode::Sigmoid { gamma } => {
                let p = 1.0 / (1.0 + (-gamma * (cap - d)).exp());
                let mut rng = derive_rng(
                    self.seed,
                    &[str_key(task_id), span.0 as u64, span.1 as u64, model_id as u64, nonce],
                );
                rng.gen_bool(p.clamp(1e-12, 1.0 - 1e-12))
            }
        }
    }

    /// Simulated per-token probabilities for a subtask: centered on
    /// 1 - difficulty so harder subtasks yield lower quantiles.
    pub fn token_probs(&self, task_id: &str, subtask: &Subtask) -> Result<Vec<f64>> {
        let d = self.subtask_difficulty(task_id, subtask)?;
        let usage = self.subtask_usage(task_id, subtask)?;
        let n = (usage.prompt_tokens.min(64)).max(8) as usize;
        let (a, b) = parse_span(&subtask.text).expect("validated above");
        let mut rng = derive_rng(self.seed, &[str_key(task_id), a as u64, b as u64, 0xbeef]);
        Ok((0..n)
            .map(|_| {
                let noise = rng.gen_range(-self.prob_noise..=self.prob_noise);
                (1.0 - d + noise).clamp(0.0, 1.0)
            })
            .collect())
    }
}

impl crate::alloc::TokenProbSource for SimWorld {
    fn token_probs(&self, task: &TaskRecord, subtask: &Subtask) -> Result<Vec<f64>> {
        SimWorld::token_probs(self, &task.task_id, subtask)
    }
}

/// Identity decomposition: one subtask per latent segment.
impl crate::alloc::Decomposer for SimWorld {
    fn decompose(&self, task: &TaskRecord) -> Result<Decomposition> {
        let sim = self
            .sim_task(&task.task_id)
            .ok_or_else(|| Error::GeneratorFailure(format!("unknown sim task {}", task.task_id)))?;
        Ok(SimWorld::identity_decomposition(sim))
    }
}

impl StepExecutor for SimWorld {
    fn execute(
        &self,
        task: &TaskRecord,
        subtask: &Subtask,
        model_id: usize,
        input: &StepInput,
    ) -> Result<StepOutcome> {
        let d = self.subtask_difficulty(&task.task_id, subtask)?;
        let usage = self.subtask_usage(&task.task_id, subtask)?;
        let (a, b) = parse_span(&subtask.text).expect("validated above");
        let ok = !input.is_failed() && self.step_correct(&task.task_id, (a, b), model_id, d);
        let content = if ok {
            format!("solved:{}:{}", task.task_id, b)
        } else {
            FAILURE_MARKER.to_string()
        };
        Ok(StepOutcome {
            content,
            usage,
            latency_ms: usage.total() / 10 + model_id as u64,
        })
    }
}

/// Candidate decompositions at different granularities: all contiguous
/// partitions of the segment sequence, identity (finest) first, coarsest
/// last, truncated to `m`.
pub struct GranularityGenerator<'a> {
    pub world: &'a SimWorld,
}

impl DecompositionGenerator for GranularityGenerator<'_> {
    fn generate(&self, task: &TaskRecord, m: usize) -> Result<Vec<Decomposition>> {
        let sim = self
            .world
            .sim_task(&task.task_id)
            .ok_or_else(|| Error::GeneratorFailure(format!("unknown sim task {}", task.task_id)))?;
        let k = sim.k();
        // split-point bitmask; all ones = identity decomposition
        let mut masks: Vec<u32> = (0..(1u32 << (k - 1))).collect();
        masks.sort_by_key(|mask| std::cmp::Reverse((mask.count_ones(), *mask)));
        let mut out = Vec::new();
        for mask in masks.into_iter().take(m) {
            let mut subtasks = Vec::new();
            let mut start = 0;
            for seg in 0..k {
                let split_here = seg == k - 1 || (mask >> seg) & 1 == 1;
                if split_here {
                    subtasks.push(Subtask::new(
                        subtasks.len(),
                        subtask_text(&sim.task_id, start, seg),
                    ));
                    start = seg + 1;
                }
            }
            out.push(Decomposition::new(sim.task_id.clone(), subtasks));
        }
        Ok(out)
    }
}

/// Rollout environment over the simulated world for policy co-training.
/// Contexts are task ids; decomposer actions index into the granularity
/// generator's candidate ordering, allocator actions are pool model ids.
pub struct SimRolloutEnv<'a> {
    pub world: &'a SimWorld,
    /// Cap on the number of candidate decompositions per task.
    pub max_candidates: usize,
    pub alpha: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl<'a> SimRolloutEnv<'a> {
    pub fn new(world: &'a SimWorld, max_candidates: usize) -> Self {
        let p = crate::alloc::AllocSearchParams::default();
        SimRolloutEnv {
            world,
            max_candidates,
            alpha: p.alpha,
            tau1: p.tau1,
            tau2: p.tau2,
        }
    }

    fn candidates(&self, context_id: &str) -> Result<Vec<Decomposition>> {
        let sim = self
            .world
            .sim_task(context_id)
            .ok_or_else(|| Error::GeneratorFailure(format!("unknown sim task {context_id}")))?;
        let gen = GranularityGenerator { world: self.world };
        let record = SimWorld::task_record(sim);
        crate::decomp::DecompositionGenerator::generate(&gen, &record, self.max_candidates)
    }

    fn estimate(&self, context_id: &str, subtask: &Subtask) -> Result<(f64, crate::alloc::Bucket)> {
        let sim = self.world.sim_task(context_id).expect("validated by caller");
        let record = SimWorld::task_record(sim);
        let est = crate::alloc::estimate_and_bucket(
            &record, subtask, self.world, self.alpha, self.tau1, self.tau2,
        )?;
        Ok((est.quantile_value, est.bucket))
    }
}

impl crate::grpo::RolloutEnv for SimRolloutEnv<'_> {
    fn context_ids(&self) -> Vec<String> {
        self.world.tasks().map(|t| t.task_id.clone()).collect()
    }

    fn candidate_count(&self, context_id: &str) -> Result<usize> {
        Ok(self.candidates(context_id)?.len())
    }

    /// Task-level context for the decomposer head: mean difficulty
    /// quantile, bucket mix over the finest-grained segments, and a
    /// normalized segment count in the length slot.
    fn task_features(&self, context_id: &str) -> Result<Vec<f64>> {
        let sim = self
            .world
            .sim_task(context_id)
            .ok_or_else(|| Error::GeneratorFailure(format!("unknown sim task {context_id}")))?;
        let identity = SimWorld::identity_decomposition(sim);
        let mut quantile_sum = 0.0;
        let mut mix = [0.0f64; 3];
        for s in &identity.subtasks {
            let (q, bucket) = self.estimate(context_id, s)?;
            quantile_sum += q;
            let one_hot = bucket.one_hot();
            for (m, o) in mix.iter_mut().zip(one_hot) {
                *m += o;
            }
        }
        let k = identity.k() as f64;
        Ok(vec![
            quantile_sum / k,
            mix[0] / k,
            mix[1] / k,
            mix[2] / k,
            0.0,
            (k / 8.0).min(1.0),
            1.0,
        ])
    }

    fn subtask_features(&self, context_id: &str, candidate: usize) -> Result<Vec<Vec<f64>>> {
        let cands = self.candidates(context_id)?;
        let decomp = cands
            .get(candidate)
            .ok_or_else(|| Error::GeneratorFailure(format!("candidate {candidate} out of range")))?;
        let k = decomp.k();
        decomp
            .subtasks
            .iter()
            .map(|s| {
                let (q, bucket) = self.estimate(context_id, s)?;
                Ok(crate::grpo::FeatureVector::for_subtask(q, bucket, s.index, k, s.text.len())
                    .to_vec())
            })
            .collect()
    }

    /// Execute the routed chain: reward 1 iff every step succeeds; cost
    /// accrues for every step regardless of outcome.
    fn execute(
        &self,
        context_id: &str,
        candidate: usize,
        assignments: &[usize],
        nonce: u64,
    ) -> Result<(f64, Cost)> {
        let cands = self.candidates(context_id)?;
        let decomp = cands
            .get(candidate)
            .ok_or_else(|| Error::GeneratorFailure(format!("candidate {candidate} out of range")))?;
        if assignments.len() != decomp.k() {
            return Err(Error::LabelMismatch(format!(
                "{} assignments for {} subtasks",
                assignments.len(),
                decomp.k()
            )));
        }
        let mut all_ok = true;
        let mut cost = Cost::ZERO;
        for (s, &model_id) in decomp.subtasks.iter().zip(assignments) {
            let d = self.world.subtask_difficulty(context_id, s)?;
            let usage = self.world.subtask_usage(context_id, s)?;
            let span = parse_span(&s.text).expect("validated above");
            if !self
                .world
                .step_correct_with_nonce(context_id, span, model_id, d, nonce)
            {
                all_ok = false;
            }
            cost += usage_cost(usage, self.world.pool.get(model_id));
        }
        Ok((f64::from(u8::from(all_ok)), cost))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub assignments: Vec<usize>,
    pub acc: bool,
    pub cost: Cost,
}

/// Exhaustive allocation oracle for the deterministic simulator: enumerates
/// every pool^k scheme and returns the cheapest correct one (ties go to the
/// lexicographically smallest id vector). When no scheme is correct, returns
/// the all-top sentinel with `acc = false`.
pub fn brute_force_optimal(
    difficulties: &[f64],
    usages: &[TokenUsage],
    pool: &ModelPool,
) -> Result<BruteForceResult> {
    let k = difficulties.len();
    let n = pool.len();
    if k > 3 || n > 9 {
        return Err(Error::InstanceTooLarge { k, pool: n });
    }
    assert_eq!(k, usages.len());
    let mut best: Option<(Cost, Vec<usize>)> = None;
    let mut assignment = vec![0usize; k];
    loop {
        let acc = assignment
            .iter()
            .zip(difficulties)
            .all(|(&m, &d)| pool.capability(m) >= d);
        if acc {
            let cost: Cost = assignment
                .iter()
                .zip(usages)
                .map(|(&m, &u)| usage_cost(u, pool.get(m)))
                .sum();
            let better = match &best {
                None => true,
                Some((c, _)) => cost < *c,
            };
            if better {
                best = Some((cost, assignment.clone()));
            }
        }
        // lexicographic increment
        let mut i = k;
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            assignment[i] += 1;
            if assignment[i] < n {
                break;
            }
            assignment[i] = 0;
        }
        if assignment.iter().all(|&a| a == 0) {
            break;
        }
    }
    Ok(match best {
        Some((cost, assignments)) => BruteForceResult { assignments, acc: true, cost },
        None => BruteForceResult {
            assignments: vec![n - 1; k],
            acc: false,
            cost: usages
                .iter()
                .map(|&u| usage_cost(u, pool.top_model()))
                .sum(),
        },
    })
}

/// Wire format: one simulated task per line.
#[derive(Debug, Serialize, Deserialize)]
struct SimTaskRecord {
    task_id: String,
    difficulties: Vec<f64>,
    tokens: Vec<(u64, u64)>,
}

pub fn write_sim_tasks(tasks: &[SimTask], out: &mut dyn Write) -> Result<()> {
    for t in tasks {
        let rec = SimTaskRecord {
            task_id: t.task_id.clone(),
            difficulties: t.latent_difficulties.clone(),
            tokens: t.token_profile.clone(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sim_tasks(input: &mut dyn BufRead) -> Result<Vec<SimTask>> {
    let mut tasks = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SimTaskRecord = serde_json::from_str(&line)?;
        tasks.push(SimTask {
            task_id: rec.task_id,
            latent_difficulties: rec.difficulties,
            token_profile: rec.tokens,
        });
    }
    Ok(tasks)
}
