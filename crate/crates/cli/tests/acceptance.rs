//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single PASS line; the expected values come from independent
//! re-implementations (oracles) living in this file, not from the library
//! under test.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use model_router::alloc::{estimate_and_bucket, grouped_search, AllocSearchParams, Bucket, ChainEvaluator};
use model_router::decomp::{select_best, Decomposition, ScoreWeights, Subtask};
use model_router::exec::{ExactMatchChecker, LastStepIntegrator};
use model_router::grpo::{
    cotrain, grpo_objective_and_gradient, FeatureVector, GrpoConfig, PolicyParams, Rollout,
    TrajectoryGroup,
};
use model_router::orchestrate::{
    compute_metrics, route_task, PrmConfig, RoutingTrace, UniformAllocator,
};
use model_router::pool::{usage_cost, Cost, ModelPool, TokenUsage};
use model_router::sim::{brute_force_optimal, gen_tasks, DifficultyDist, SimMode, SimWorld};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pool9() -> ModelPool {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pool9.toml");
    ModelPool::load(&std::fs::read_to_string(path).expect("pool config present")).unwrap()
}

fn assert_runtime(start: Instant, limit: Duration, what: &str) {
    let elapsed = start.elapsed();
    assert!(elapsed < limit, "{what} took {elapsed:?}, limit {limit:?}");
}

// --- criterion 1: rejection-sampling selection matches a brute-force scan

fn random_candidates(rng: &mut ChaCha8Rng) -> Vec<Decomposition> {
    let n = rng.gen_range(1..=6);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=4);
            let subtasks = (0..k)
                .map(|j| {
                    let mut s = Subtask::new(j, format!("candidate {i} step {j}"));
                    s.token_count_eval = Some(rng.gen_range(50..500));
                    s
                })
                .collect();
            let mut d = Decomposition::new(format!("t{i}"), subtasks);
            d.coe_pairs = Some(rng.gen_range(0..3));
            d.correctness = Some(rng.gen_bool(0.6));
            model_router::decomp::score_decomposition(&mut d, ScoreWeights::default()).unwrap();
            d
        })
        .collect()
}

/// Independent scan: cheapest correct candidate if any is correct, else
/// cheapest overall; ties broken by fewer subtasks, then generation order.
fn scan_best(samples: &[Decomposition]) -> usize {
    let any_correct = samples.iter().any(|d| d.correctness == Some(true));
    let mut best: Option<usize> = None;
    for (i, d) in samples.iter().enumerate() {
        if any_correct && d.correctness != Some(true) {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (bs, bk) = (samples[b].score.unwrap(), samples[b].k());
                let (ds, dk) = (d.score.unwrap(), d.k());
                ds < bs || (ds == bs && dk < bk)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best.unwrap()
}

#[test]
fn criterion_1_selection_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let samples = random_candidates(&mut rng);
        let chosen = select_best(&samples).unwrap();
        let expected = &samples[scan_best(&samples)];
        assert_eq!(chosen, expected);
    }
    assert_runtime(start, Duration::from_secs(1), "criterion 1");
    println!("criterion 1 (selection oracle equivalence, 1000 sets): PASS");
}

// --- criterion 2: grouped search vs the exhaustive oracle

/// Independent re-implementation of the three-phase search path on the
/// 9-model pool (groups {0,1,2}/{3,4,5}/{6,7,8}, medium of each = index 1),
/// with correctness decided directly from the latent difficulties.
struct PathResult {
    assignments: Vec<usize>,
    acc: bool,
}

fn independent_path_min(
    difficulties: &[f64],
    usages: &[(u64, u64)],
    buckets: &[Bucket],
    pool: &ModelPool,
    limit: usize,
) -> PathResult {
    const GROUPS: [[usize; 3]; 3] = [[0, 1, 2], [3, 4, 5], [6, 7, 8]];
    let tier_of = |b: &Bucket| match b {
        Bucket::Easy => 0usize,
        Bucket::Medium => 1,
        Bucket::Hard => 2,
    };
    let cap = |id: usize| id as f64 / 8.0;
    let cost_of = |assignments: &[usize]| -> u64 {
        assignments
            .iter()
            .zip(usages)
            .map(|(&m, &(i, o))| {
                let spec = pool.get(m);
                spec.price_in_mc * i + spec.price_out_mc * o
            })
            .sum()
    };
    let first_failing = |assignments: &[usize]| -> Option<usize> {
        assignments
            .iter()
            .zip(difficulties)
            .position(|(&m, &d)| cap(m) < d)
    };

    let mut tiers: Vec<usize> = buckets.iter().map(tier_of).collect();
    let mut current: Vec<usize> = tiers.iter().map(|&t| GROUPS[t][1]).collect();
    let mut visited: HashSet<Vec<usize>> = HashSet::new();
    let mut evaluated: Vec<(Vec<usize>, bool, u64)> = Vec::new();

    loop {
        let failing = first_failing(&current);
        let acc = failing.is_none();
        visited.insert(current.clone());
        evaluated.push((current.clone(), acc, cost_of(&current)));
        if evaluated.len() >= limit {
            break;
        }
        if !acc && current.iter().all(|&a| a == 8) {
            break;
        }

        let mut next = current.clone();
        let mut next_tiers = tiers.clone();
        let mut moved = false;
        if acc {
            for (i, a) in next.iter_mut().enumerate() {
                let pos = GROUPS[tiers[i]].iter().position(|&m| m == *a).unwrap();
                if pos > 0 {
                    *a = GROUPS[tiers[i]][pos - 1];
                    moved = true;
                }
            }
            if !moved {
                for (i, a) in next.iter_mut().enumerate() {
                    if tiers[i] > 0 {
                        next_tiers[i] = tiers[i] - 1;
                        *a = GROUPS[tiers[i] - 1][1];
                        moved = true;
                    }
                }
            }
        } else {
            for (i, a) in next.iter_mut().enumerate() {
                let pos = GROUPS[tiers[i]].iter().position(|&m| m == *a).unwrap();
                if pos + 1 < 3 {
                    *a = GROUPS[tiers[i]][pos + 1];
                    moved = true;
                }
            }
            if !moved {
                let from = failing.unwrap_or(0);
                for i in from..next.len() {
                    if tiers[i] < 2 {
                        next_tiers[i] = tiers[i] + 1;
                        next[i] = GROUPS[tiers[i] + 1][1];
                        moved = true;
                    }
                }
            }
        }
        if !moved || visited.contains(&next) {
            break;
        }
        current = next;
        tiers = next_tiers;
    }

    let best = evaluated
        .iter()
        .filter(|(_, acc, _)| *acc)
        .min_by_key(|(_, _, cost)| *cost);
    match best {
        Some((a, _, _)) => PathResult { assignments: a.clone(), acc: true },
        None => {
            let (a, acc, _) = evaluated.last().unwrap();
            PathResult { assignments: a.clone(), acc: *acc }
        }
    }
}

#[test]
fn criterion_2_grouped_search_vs_oracle() {
    let start = Instant::now();
    let pool = pool9();
    let tasks = gen_tasks(202, 200, (1, 3), DifficultyDist::Uniform);
    let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
    let evaluator = ChainEvaluator {
        executor: &world,
        checker: &ExactMatchChecker,
        pool: &pool,
    };
    let params = AllocSearchParams::default();
    let mut matches = 0usize;

    for t in &tasks {
        let record = SimWorld::task_record(t);
        let decomposition = SimWorld::identity_decomposition(t);
        let buckets: Vec<Bucket> = decomposition
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
            &decomposition.subtasks,
            &buckets,
            &model_router::pool::partition_groups(&pool).unwrap(),
            &pool,
            &evaluator,
            params.limit,
        )
        .unwrap();

        let usages: Vec<TokenUsage> = t
            .token_profile
            .iter()
            .map(|&(i, o)| TokenUsage::new(i, o))
            .collect();
        let oracle = brute_force_optimal(&t.latent_difficulties, &usages, &pool).unwrap();
        if oracle.acc {
            assert_eq!(trace.result.acc, Some(true), "search must solve solvable {}", t.task_id);
            let all_top: Cost = usages.iter().map(|&u| usage_cost(u, pool.get(8))).sum();
            assert!(trace.result.cost.unwrap().microcents() <= all_top.microcents());
        }

        let path = independent_path_min(
            &t.latent_difficulties,
            &t.token_profile,
            &buckets,
            &pool,
            params.limit,
        );
        if trace.result.assignments == path.assignments
            && trace.result.acc == Some(path.acc)
        {
            matches += 1;
        }
    }
    let rate = matches as f64 / tasks.len() as f64;
    assert!(rate >= 0.90, "only {rate:.2} of schemes match the phase-reachable minimum");
    assert_runtime(start, Duration::from_secs(10), "criterion 2");
    println!("criterion 2 (grouped search vs oracle, match rate {rate:.3}): PASS");
}

// --- criterion 3: analytic gradient vs central finite differences

fn random_policy(rng: &mut ChaCha8Rng, actions: usize, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(actions, FeatureVector::DIM);
    for w in &mut p.weights {
        *w = rng.gen_range(-scale..scale);
    }
    p
}

fn random_group(rng: &mut ChaCha8Rng, behavior: &PolicyParams, g: usize) -> TrajectoryGroup {
    let mut rollouts = Vec::with_capacity(g);
    for _ in 0..g {
        let steps = rng.gen_range(1..=3);
        let mut features = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x: Vec<f64> = (0..FeatureVector::DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
            features.push(x);
        }
        let mut actions = Vec::new();
        let mut logprobs_old = Vec::new();
        for x in &features {
            let (a, lp) = behavior.sample(x, &mut *rng);
            actions.push(a);
            logprobs_old.push(lp);
        }
        let reward = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        rollouts.push(Rollout { actions, logprobs_old, features, reward, cost: Cost::ZERO });
    }
    TrajectoryGroup { context_id: "ctx".into(), rollouts }
}

#[test]
fn criterion_3_gradient_finite_difference_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = GrpoConfig { kl_beta: 0.05, ..GrpoConfig::default() };
    for _ in 0..50 {
        let behavior = random_policy(&mut rng, 9, 0.3);
        let batch = vec![random_group(&mut rng, &behavior, 8)];
        let ref_policy = random_policy(&mut rng, 9, 0.3);
        // evaluate near the behavior policy so no step sits on a clip kink
        let params = random_policy(&mut rng, 9, 0.02);
        let (_, analytic) = grpo_objective_and_gradient(&batch, &params, &ref_policy, &cfg).unwrap();

        let h = 1e-6;
        let norm: f64 = analytic.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
        for i in 0..params.weights.len() {
            let mut plus = params.clone();
            plus.weights[i] += h;
            let mut minus = params.clone();
            minus.weights[i] -= h;
            let (op, _) = grpo_objective_and_gradient(&batch, &plus, &ref_policy, &cfg).unwrap();
            let (om, _) = grpo_objective_and_gradient(&batch, &minus, &ref_policy, &cfg).unwrap();
            let numeric = (op - om) / (2.0 * h);
            assert!(
                (analytic[i] - numeric).abs() <= 1e-5 * norm,
                "component {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
    assert_runtime(start, Duration::from_secs(5), "criterion 3");
    println!("criterion 3 (gradient matches finite differences, 50 instances): PASS");
}

// --- criterion 4: co-training raises the mean final reward

#[test]
fn criterion_4_grpo_learning_improves_reward() {
    let start = Instant::now();
    let pool = pool9();
    let tasks = gen_tasks(404, 500, (1, 3), DifficultyDist::Uniform);
    let world = SimWorld::new(tasks, pool.clone(), SimMode::Sigmoid { gamma: 8.0 }, 404);
    let env = model_router::sim::SimRolloutEnv::new(&world, 8);
    // learning-rate / clip / iteration settings are free (not fixed by the method);
    // chosen so six rounds move the policy measurably
    let cfg = GrpoConfig {
        group_size: 8,
        clip_eps: 1.0,
        kl_beta: 0.01,
        learning_rate: 1.0,
        iterations: 30,
        seed: 404,
    };
    let decomp0 = PolicyParams::zeros(8, FeatureVector::DIM);
    let alloc0 = PolicyParams::zeros(pool.len(), FeatureVector::DIM);
    let (decomp1, alloc1, history) = cotrain(&decomp0, &alloc0, &env, &cfg, 6).unwrap();

    assert!(decomp1.weights.iter().all(|w| w.is_finite()));
    assert!(alloc1.weights.iter().all(|w| w.is_finite()));
    for h in &history {
        assert!(h.mean_reward.is_finite() && h.objective.is_finite() && h.kl.is_finite());
    }
    let first = history.first().unwrap().mean_reward;
    let last = history.last().unwrap().mean_reward;
    assert!(
        last - first >= 0.15,
        "reward moved only {first:.3} -> {last:.3}"
    );
    assert_runtime(start, Duration::from_secs(60), "criterion 4");
    println!("criterion 4 (co-training reward {first:.3} -> {last:.3}): PASS");
}

// --- criteria 5 & 8 drive the CLI binary

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_model-router"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn CLI");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pool_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pool9.toml")
}

#[test]
fn criterion_5_cost_accuracy_analog() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let pool = pool_path();

    run_ok(bin().args(["sim-gen", "--seed", "42", "--n", "200"]).arg("--out").arg(p("train.jsonl")));
    run_ok(
        bin()
            .args(["alloc-dataset"])
            .arg("--tasks")
            .arg(p("train.jsonl"))
            .arg("--pool")
            .arg(&pool)
            .arg("--out")
            .arg(p("alloc.jsonl")),
    );
    run_ok(
        bin()
            .args(["train", "--method", "sft"])
            .arg("--labels")
            .arg(p("alloc.jsonl"))
            .arg("--pool")
            .arg(&pool)
            .arg("--out-policy")
            .arg(p("policy.json")),
    );
    run_ok(bin().args(["sim-gen", "--seed", "1042", "--n", "1000"]).arg("--out").arg(p("eval.jsonl")));
    run_ok(
        bin()
            .args(["eval", "--baseline-model", "8"])
            .arg("--tasks")
            .arg(p("eval.jsonl"))
            .arg("--pool")
            .arg(&pool)
            .arg("--policy")
            .arg(p("policy.json"))
            .arg("--report")
            .arg(p("report.json")),
    );

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let ratio = report["baseline"]["cost_ratio"].as_f64().unwrap();
    let acc_delta = report["baseline"]["acc_delta"].as_f64().unwrap();
    assert!(ratio <= 0.40, "routed cost is {:.1}% of the all-top baseline", ratio * 100.0);
    assert!(acc_delta >= -0.02, "accuracy fell {acc_delta:.4} below the baseline");
    assert_runtime(start, Duration::from_secs(120), "criterion 5");
    println!(
        "criterion 5 (cost {:.1}% of baseline, accuracy delta {:+.4}): PASS",
        ratio * 100.0,
        acc_delta
    );
}

// --- criterion 6: metric arithmetic and ledger exactness

#[test]
fn criterion_6_metric_arithmetic_and_ledger() {
    let pool = pool9();
    let tasks = gen_tasks(606, 2, (2, 2), DifficultyDist::Point(0.1));
    let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
    let route = |t: &model_router::sim::SimTask, scheme: Vec<usize>| -> RoutingTrace {
        let record = SimWorld::task_record(t);
        route_task(
            &record,
            &world,
            &model_router::orchestrate::FixedSchemeAllocator(scheme),
            &world,
            &ExactMatchChecker,
            &LastStepIntegrator,
            &pool,
            &PrmConfig::disabled(),
        )
        .unwrap()
    };
    let label = |t: &model_router::sim::SimTask, labels: Vec<usize>| {
        model_router::alloc::AllocDatasetEntry {
            task_id: t.task_id.clone(),
            subtasks: vec![String::new(); labels.len()],
            estimates: vec![],
            label_assignments: labels,
        }
    };

    let m = compute_metrics(&[route(&tasks[0], vec![2, 4])], Some(&[label(&tasks[0], vec![3, 4])]))
        .unwrap();
    assert_eq!(m.mae, Some(0.5));
    let m = compute_metrics(&[route(&tasks[0], vec![0, 8])], Some(&[label(&tasks[0], vec![8, 0])]))
        .unwrap();
    assert_eq!(m.mae, Some(8.0));

    // ledger exactness on 100 reviewed runs: the trace total equals the sum
    // of its step and review costs in exact integer sub-cent arithmetic
    let tasks = gen_tasks(616, 100, (1, 3), DifficultyDist::Uniform);
    let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
    let prm = PrmConfig::enabled(8, 6);
    for t in &tasks {
        let record = SimWorld::task_record(t);
        let trace = route_task(
            &record,
            &world,
            &UniformAllocator(4),
            &world,
            &ExactMatchChecker,
            &LastStepIntegrator,
            &pool,
            &prm,
        )
        .unwrap();
        let mut expected: u64 = 0;
        for s in &trace.step_results {
            expected += usage_cost(s.usage, pool.get(s.model_id)).microcents();
            if let Some(u) = s.prm_usage {
                expected += usage_cost(u, pool.get(prm.strong_model_id)).microcents();
            }
        }
        assert_eq!(trace.cost_microcents, expected);
    }
    println!("criterion 6 (metric fixtures and exact cost ledger): PASS");
}

// --- criterion 7: procedural review never hurts

#[test]
fn criterion_7_prm_monotonicity() {
    let pool = pool9();
    let tasks = gen_tasks(707, 500, (1, 3), DifficultyDist::Uniform);
    let world = SimWorld::new(tasks.clone(), pool.clone(), SimMode::Deterministic, 0);
    // strong model 8 is always correct in the deterministic simulator
    let prm = PrmConfig::enabled(8, 8);
    for (i, t) in tasks.iter().enumerate() {
        let record = SimWorld::task_record(t);
        let allocator = UniformAllocator(i % pool.len());
        let run = |prm: &PrmConfig| {
            route_task(
                &record,
                &world,
                &allocator,
                &world,
                &ExactMatchChecker,
                &LastStepIntegrator,
                &pool,
                prm,
            )
            .unwrap()
        };
        let off = run(&PrmConfig::disabled());
        let on = run(&prm);
        assert!(
            u8::from(on.acc) >= u8::from(off.acc),
            "review lowered accuracy on {}",
            t.task_id
        );
    }
    println!("criterion 7 (review monotone over 500 paired runs): PASS");
}

// --- criterion 8: byte-identical pipeline reruns

#[test]
fn criterion_8_pipeline_determinism() {
    let pool = pool_path();
    let dirs: Vec<tempfile::TempDir> =
        (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &dirs {
        let p = |name: &str| dir.path().join(name);
        run_ok(bin().args(["sim-gen", "--seed", "42", "--n", "60"]).arg("--out").arg(p("tasks.jsonl")));
        run_ok(
            bin()
                .args(["alloc-dataset"])
                .arg("--tasks")
                .arg(p("tasks.jsonl"))
                .arg("--pool")
                .arg(&pool)
                .arg("--out")
                .arg(p("alloc.jsonl")),
        );
        run_ok(
            bin()
                .args(["search"])
                .arg("--tasks")
                .arg(p("tasks.jsonl"))
                .arg("--pool")
                .arg(&pool)
                .arg("--out")
                .arg(p("search.jsonl")),
        );
        run_ok(
            bin()
                .args(["train", "--method", "sft", "--epochs", "500"])
                .arg("--labels")
                .arg(p("alloc.jsonl"))
                .arg("--pool")
                .arg(&pool)
                .arg("--out-policy")
                .arg(p("policy.json")),
        );
        run_ok(
            bin()
                .args(["train", "--method", "grpo", "--rounds", "2", "--seed", "5"])
                .arg("--tasks")
                .arg(p("tasks.jsonl"))
                .arg("--pool")
                .arg(&pool)
                .arg("--out-policy")
                .arg(p("grpo_policy.json"))
                .arg("--history")
                .arg(p("history.jsonl")),
        );
        run_ok(
            bin()
                .args(["route", "--prm", "--workers", "3"])
                .arg("--tasks")
                .arg(p("tasks.jsonl"))
                .arg("--pool")
                .arg(&pool)
                .arg("--policy")
                .arg(p("policy.json"))
                .arg("--out")
                .arg(p("traces.jsonl")),
        );
        run_ok(
            bin()
                .args(["eval", "--baseline-model", "8"])
                .arg("--tasks")
                .arg(p("tasks.jsonl"))
                .arg("--pool")
                .arg(&pool)
                .arg("--policy")
                .arg(p("policy.json"))
                .arg("--labels")
                .arg(p("alloc.jsonl"))
                .arg("--report")
                .arg(p("report.json")),
        );
    }
    for name in [
        "tasks.jsonl",
        "alloc.jsonl",
        "search.jsonl",
        "policy.json",
        "grpo_policy.json",
        "history.jsonl",
        "traces.jsonl",
        "report.json",
    ] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    println!("criterion 8 (byte-identical pipeline reruns): PASS");
}
