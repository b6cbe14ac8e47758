//! Command-line pipeline for the cost-aware model router: synthetic task
//! generation, dataset building, allocation search, policy training,
//! routed execution and evaluation.
//!
//! Every subcommand prints exactly one JSON summary line to stdout and
//! writes its artifacts atomically (temp file + rename). Exit codes:
//! 0 success, 1 domain error, 2 usage error. Config precedence is
//! flags > `--config` file > built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use model_router::alloc::{
    build_alloc_dataset, estimate_and_bucket, grouped_search, read_alloc_dataset,
    write_alloc_dataset, AllocDatasetEntry, AllocSearchParams, ChainEvaluator,
};
use model_router::decomp::{build_decomp_dataset, write_decomp_dataset, LexicalOverlapJudge, ScoreWeights};
use model_router::exec::{ExactMatchChecker, LastStepIntegrator, TaskRecord};
use model_router::grpo::{
    cotrain, fit_supervised, load_policy, save_policy, write_history, FeatureVector, GrpoConfig,
    PolicyParams,
};
use model_router::orchestrate::{
    compute_metrics, route_task, write_traces, AllocatorPolicy, MetricsReport, PolicyAllocator,
    PrmConfig, RoutingTrace, UniformAllocator,
};
use model_router::pool::{partition_groups, ModelPool};
use model_router::sim::{
    gen_tasks, read_sim_tasks, write_sim_tasks, DifficultyDist, GranularityGenerator, SimMode,
    SimRolloutEnv, SimTask, SimWorld,
};

#[derive(Parser)]
#[command(
    name = "model-router",
    version,
    about = "Cost-aware routing of decomposed tasks over a capability-ranked model pool",
    after_help = "Defaults for score weights, alpha, tau-diff1/tau-diff2 and the GRPO \
                  hyperparameters are implementation choices, not fixed by the method."
)]
struct Cli {
    /// TOML config file; flags override file values, which override defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic task set (JSONL)
    SimGen(SimGenArgs),
    /// Build the decomposition dataset by rejection-sampling candidates
    DecompDataset(DecompDatasetArgs),
    /// Build the allocation dataset from grouped-search labels
    AllocDataset(AllocDatasetArgs),
    /// Run the grouped allocation search and emit one result per task
    Search(SearchArgs),
    /// Train routing policies (supervised fit or GRPO co-training)
    Train(TrainArgs),
    /// Route tasks end to end and write traces
    Route(RouteArgs),
    /// Route tasks and reduce the traces into a metrics report
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimGenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tasks
    #[arg(long)]
    n: usize,
    /// Minimum subtasks per task
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    /// Maximum subtasks per task
    #[arg(long, default_value_t = 3)]
    k_max: usize,
    /// Latent difficulty distribution: "uniform" or "point:<v>"
    #[arg(long, default_value = "uniform")]
    difficulty: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecompDatasetArgs {
    /// Task file produced by sim-gen
    #[arg(long)]
    tasks: PathBuf,
    /// Pool TOML config
    #[arg(long)]
    pool: PathBuf,
    /// Candidate decompositions sampled per task
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Subtask-count weight w_c (default 1.0, not fixed by the method)
    #[arg(long)]
    w_c: Option<f64>,
    /// Token-cost weight w_p (default 0.01, not fixed by the method)
    #[arg(long)]
    w_p: Option<f64>,
    /// Incoherence weight w_d (default 5.0, not fixed by the method)
    #[arg(long)]
    w_d: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AllocDatasetArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    /// Difficulty quantile alpha (default 0.5, not fixed by the method)
    #[arg(long)]
    alpha: Option<f64>,
    /// Easy/medium threshold tau-diff1 (default 0.75, not fixed by the method)
    #[arg(long)]
    tau1: Option<f64>,
    /// Medium/hard threshold tau-diff2 (default 0.45, not fixed by the method)
    #[arg(long)]
    tau2: Option<f64>,
    /// Allocation search iteration cap, at most 20
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMethod {
    /// Supervised cross-entropy fit on grouped-search labels
    Sft,
    /// GRPO co-training of decomposer and allocator heads
    Grpo,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: TrainMethod,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Allocation dataset (required for sft)
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Full-batch epochs for sft (default 3000, not fixed by the method)
    #[arg(long, default_value_t = 3000)]
    epochs: usize,
    /// Learning rate for sft (default 2.0, not fixed by the method)
    #[arg(long, default_value_t = 2.0)]
    sft_lr: f64,
    /// Task file (required for grpo)
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Sigmoid sharpness of the simulated environment
    #[arg(long, default_value_t = 8.0)]
    gamma: f64,
    /// Alternating co-training rounds (decomposer first)
    #[arg(long, default_value_t = 6)]
    rounds: usize,
    /// Rollouts per task group G (default 8, not fixed by the method)
    #[arg(long)]
    group_size: Option<usize>,
    /// Clip epsilon (default 0.2, not fixed by the method)
    #[arg(long)]
    clip_eps: Option<f64>,
    /// KL penalty beta (default 0.01, not fixed by the method)
    #[arg(long)]
    kl_beta: Option<f64>,
    /// Ascent learning rate (default 0.05, not fixed by the method)
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Ascent steps per round (default 10, not fixed by the method)
    #[arg(long)]
    iterations: Option<usize>,
    /// Cap on candidate decompositions per task
    #[arg(long, default_value_t = 8)]
    max_candidates: usize,
    /// Warm-start allocator checkpoint
    #[arg(long)]
    init_policy: Option<PathBuf>,
    /// Output allocator checkpoint
    #[arg(long)]
    out_policy: PathBuf,
    /// Output decomposer checkpoint (grpo only)
    #[arg(long)]
    out_decomp_policy: Option<PathBuf>,
    /// Per-round training history (JSONL)
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct RoutingArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sigmoid sharpness; omitted = deterministic simulator
    #[arg(long)]
    gamma: Option<f64>,
    /// Trained allocator checkpoint
    #[arg(long, conflicts_with = "model")]
    policy: Option<PathBuf>,
    /// Extra capability ranks added to policy assignments
    #[arg(long, default_value_t = 0)]
    margin: usize,
    /// Route every subtask to this fixed model id
    #[arg(long)]
    model: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    /// Enable procedural review of below-threshold steps
    #[arg(long)]
    prm: bool,
    /// Strong reviewer model id (default: pool top)
    #[arg(long)]
    strong_model: Option<usize>,
    /// Capability threshold model id (default: pool top)
    #[arg(long)]
    threshold_model: Option<usize>,
    /// Concurrent routing workers
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RouteArgs {
    #[command(flatten)]
    routing: RoutingArgs,
    /// Output traces (JSONL)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    routing: RoutingArgs,
    /// Allocation dataset for the MAE metric
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also route everything to this model and report the comparison
    #[arg(long)]
    baseline_model: Option<usize>,
    /// Output metrics report (JSON)
    #[arg(long)]
    report: PathBuf,
    /// Optionally also write the traces (JSONL)
    #[arg(long)]
    traces: Option<PathBuf>,
}

/// Optional config-file layer between flags and built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    alpha: Option<f64>,
    tau1: Option<f64>,
    tau2: Option<f64>,
    limit: Option<usize>,
    w_c: Option<f64>,
    w_p: Option<f64>,
    w_d: Option<f64>,
    group_size: Option<usize>,
    clip_eps: Option<f64>,
    kl_beta: Option<f64>,
    learning_rate: Option<f64>,
    iterations: Option<usize>,
    workers: Option<usize>,
    strong_model: Option<usize>,
    threshold_model: Option<usize>,
}

enum CliError {
    Usage(String),
    Domain(model_router::Error),
}

impl From<model_router::Error> for CliError {
    fn from(e: model_router::Error) -> Self {
        CliError::Domain(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Inputs must resolve at command start; anything else is a usage error.
fn read_input(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    fs::write(&tmp, bytes).map_err(model_router::Error::Io)?;
    fs::rename(&tmp, path).map_err(model_router::Error::Io)?;
    Ok(())
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn load_file_config(path: &Option<PathBuf>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => toml::from_str(&read_input(p)?)
            .map_err(|e| CliError::Usage(format!("bad config file {}: {e}", p.display()))),
    }
}

fn load_pool(path: &Path) -> CliResult<ModelPool> {
    Ok(ModelPool::load(&read_input(path)?)?)
}

fn load_tasks(path: &Path) -> CliResult<Vec<SimTask>> {
    let text = read_input(path)?;
    Ok(read_sim_tasks(&mut text.as_bytes())?)
}

fn parse_difficulty(spec: &str) -> CliResult<DifficultyDist> {
    if spec == "uniform" {
        return Ok(DifficultyDist::Uniform);
    }
    if let Some(v) = spec.strip_prefix("point:") {
        let v: f64 = v
            .parse()
            .map_err(|_| CliError::Usage(format!("bad difficulty spec: {spec}")))?;
        if !(0.0..=1.0).contains(&v) {
            return usage("point difficulty must be in [0,1]");
        }
        return Ok(DifficultyDist::Point(v));
    }
    usage(format!("bad difficulty spec: {spec} (expected \"uniform\" or \"point:<v>\")"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS // --help / --version
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<String> {
    let file = load_file_config(&cli.config)?;
    match cli.command {
        Command::SimGen(a) => cmd_sim_gen(a, &file),
        Command::DecompDataset(a) => cmd_decomp_dataset(a, &file),
        Command::AllocDataset(a) => cmd_alloc_dataset(a, &file),
        Command::Search(a) => cmd_search(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Route(a) => cmd_route(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
    }
}

fn cmd_sim_gen(a: SimGenArgs, file: &FileConfig) -> CliResult<String> {
    if a.k_min == 0 || a.k_min > a.k_max {
        return usage("need 1 <= k-min <= k-max");
    }
    let seed = pick(a.seed, file.seed, 0);
    let dist = parse_difficulty(&a.difficulty)?;
    let tasks = gen_tasks(seed, a.n, (a.k_min, a.k_max), dist);
    let mut buf = Vec::new();
    write_sim_tasks(&tasks, &mut buf)?;
    atomic_write(&a.out, &buf)?;
    Ok(json!({
        "command": "sim-gen",
        "seed": seed,
        "n": tasks.len(),
        "out": a.out,
    })
    .to_string())
}

fn cmd_decomp_dataset(a: DecompDatasetArgs, file: &FileConfig) -> CliResult<String> {
    let pool = load_pool(&a.pool)?;
    let tasks = load_tasks(&a.tasks)?;
    let seed = pick(a.seed, file.seed, 0);
    let weights = ScoreWeights {
        w_c: pick(a.w_c, file.w_c, ScoreWeights::default().w_c),
        w_p: pick(a.w_p, file.w_p, ScoreWeights::default().w_p),
        w_d: pick(a.w_d, file.w_d, ScoreWeights::default().w_d),
    };
    let world = SimWorld::new(tasks, pool, SimMode::Deterministic, seed);
    let records: Vec<TaskRecord> = world.tasks().map(SimWorld::task_record).collect();
    let generator = GranularityGenerator { world: &world };
    let entries = build_decomp_dataset(
        &records,
        &generator,
        world.pool.eval_model_id,
        &world,
        &ExactMatchChecker,
        &LexicalOverlapJudge,
        a.m,
        weights,
    )?;
    let mut buf = Vec::new();
    write_decomp_dataset(&entries, weights, &mut buf)?;
    atomic_write(&a.out, &buf)?;
    Ok(json!({
        "command": "decomp-dataset",
        "tasks": records.len(),
        "entries": entries.len(),
        "out": a.out,
    })
    .to_string())
}

fn alloc_params(
    alpha: Option<f64>,
    tau1: Option<f64>,
    tau2: Option<f64>,
    limit: Option<usize>,
    file: &FileConfig,
) -> AllocSearchParams {
    let d = AllocSearchParams::default();
    AllocSearchParams {
        alpha: pick(alpha, file.alpha, d.alpha),
        tau1: pick(tau1, file.tau1, d.tau1),
        tau2: pick(tau2, file.tau2, d.tau2),
        limit: pick(limit, file.limit, d.limit),
    }
}

fn cmd_alloc_dataset(a: AllocDatasetArgs, file: &FileConfig) -> CliResult<String> {
    let pool = load_pool(&a.pool)?;
    let tasks = load_tasks(&a.tasks)?;
    let seed = pick(a.seed, file.seed, 0);
    let params = alloc_params(a.alpha, a.tau1, a.tau2, a.limit, file);
    let world = SimWorld::new(tasks, pool.clone(), SimMode::Deterministic, seed);
    let records: Vec<TaskRecord> = world.tasks().map(SimWorld::task_record).collect();
    let grouped = partition_groups(&pool)?;
    let evaluator = ChainEvaluator {
        executor: &world,
        checker: &ExactMatchChecker,
        pool: &pool,
    };
    let entries = build_alloc_dataset(&records, &world, &world, &grouped, &pool, &evaluator, &params)?;
    let mut buf = Vec::new();
    write_alloc_dataset(&entries, &mut buf)?;
    atomic_write(&a.out, &buf)?;
    Ok(json!({
        "command": "alloc-dataset",
        "tasks": records.len(),
        "entries": entries.len(),
        "skipped": records.len() - entries.len(),
        "out": a.out,
    })
    .to_string())
}

#[derive(Serialize)]
struct SearchRecord {
    task_id: String,
    assignments: Vec<usize>,
    acc: bool,
    cost_cents: f64,
    evaluations: usize,
    exhausted: bool,
}

fn cmd_search(a: SearchArgs, file: &FileConfig) -> CliResult<String> {
    let pool = load_pool(&a.pool)?;
    let tasks = load_tasks(&a.tasks)?;
    let seed = pick(a.seed, file.seed, 0);
    let params = alloc_params(a.alpha, a.tau1, a.tau2, a.limit, file);
    let world = SimWorld::new(tasks, pool.clone(), SimMode::Deterministic, seed);
    let grouped = partition_groups(&pool)?;
    let evaluator = ChainEvaluator {
        executor: &world,
        checker: &ExactMatchChecker,
        pool: &pool,
    };
    let mut buf = Vec::new();
    let mut solved = 0usize;
    let mut total = 0usize;
    for sim in world.tasks() {
        let record = SimWorld::task_record(sim);
        let decomposition = SimWorld::identity_decomposition(sim);
        let buckets: Vec<_> = decomposition
            .subtasks
            .iter()
            .map(|s| {
                estimate_and_bucket(&record, s, &world, params.alpha, params.tau1, params.tau2)
                    .map(|e| e.bucket)
            })
            .collect::<Result<_, _>>()?;
        let trace = grouped_search(
            &record,
            &decomposition.subtasks,
            &buckets,
            &grouped,
            &pool,
            &evaluator,
            params.limit,
        )?;
        let acc = trace.result.acc == Some(true);
        solved += usize::from(acc);
        total += 1;
        let rec = SearchRecord {
            task_id: record.task_id,
            assignments: trace.result.assignments.clone(),
            acc,
            cost_cents: trace.result.cost.map(|c| c.cents()).unwrap_or(0.0),
            evaluations: trace.schemes.len(),
            exhausted: trace.exhausted,
        };
        serde_json::to_writer(&mut buf, &rec).map_err(model_router::Error::Json)?;
        buf.push(b'\n');
    }
    atomic_write(&a.out, &buf)?;
    Ok(json!({
        "command": "search",
        "tasks": total,
        "solved": solved,
        "out": a.out,
    })
    .to_string())
}

fn sft_examples(entries: &[AllocDatasetEntry]) -> Vec<(Vec<f64>, usize)> {
    let mut examples = Vec::new();
    for e in entries {
        let k = e.subtasks.len();
        for (i, est) in e.estimates.iter().enumerate() {
            let x = FeatureVector::for_subtask(
                est.quantile_value,
                est.bucket,
                i,
                k,
                e.subtasks[i].len(),
            )
            .to_vec();
            examples.push((x, e.label_assignments[i]));
        }
    }
    examples
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> CliResult<String> {
    let pool = load_pool(&a.pool)?;
    let seed = pick(a.seed, file.seed, 0);
    match a.method {
        TrainMethod::Sft => {
            let Some(labels) = &a.labels else {
                return usage("--labels is required for --method sft");
            };
            let text = read_input(labels)?;
            let entries = read_alloc_dataset(text.as_bytes())?;
            let examples = sft_examples(&entries);
            let init = match &a.init_policy {
                Some(p) => load_policy(&read_input(p)?)?,
                None => PolicyParams::zeros(pool.len(), FeatureVector::DIM),
            };
            let fitted = fit_supervised(&init, &examples, a.epochs, a.sft_lr)?;
            let train_acc = examples
                .iter()
                .filter(|(x, l)| fitted.argmax(x) == *l)
                .count() as f64
                / examples.len().max(1) as f64;
            let mut buf = Vec::new();
            save_policy(&fitted, &mut buf)?;
            atomic_write(&a.out_policy, &buf)?;
            Ok(json!({
                "command": "train",
                "method": "sft",
                "examples": examples.len(),
                "epochs": a.epochs,
                "train_acc": train_acc,
                "out_policy": a.out_policy,
            })
            .to_string())
        }
        TrainMethod::Grpo => {
            let Some(tasks_path) = &a.tasks else {
                return usage("--tasks is required for --method grpo");
            };
            let tasks = load_tasks(tasks_path)?;
            let world = SimWorld::new(tasks, pool.clone(), SimMode::Sigmoid { gamma: a.gamma }, seed);
            let env = SimRolloutEnv::new(&world, a.max_candidates);
            let d = GrpoConfig::default();
            let cfg = GrpoConfig {
                group_size: pick(a.group_size, file.group_size, d.group_size),
                clip_eps: pick(a.clip_eps, file.clip_eps, d.clip_eps),
                kl_beta: pick(a.kl_beta, file.kl_beta, d.kl_beta),
                learning_rate: pick(a.learning_rate, file.learning_rate, d.learning_rate),
                iterations: pick(a.iterations, file.iterations, d.iterations),
                seed,
            };
            let decomp0 = PolicyParams::zeros(a.max_candidates, FeatureVector::DIM);
            let alloc0 = match &a.init_policy {
                Some(p) => load_policy(&read_input(p)?)?,
                None => PolicyParams::zeros(pool.len(), FeatureVector::DIM),
            };
            let (decomp_policy, alloc_policy, history) =
                cotrain(&decomp0, &alloc0, &env, &cfg, a.rounds)?;
            let mut buf = Vec::new();
            save_policy(&alloc_policy, &mut buf)?;
            atomic_write(&a.out_policy, &buf)?;
            if let Some(p) = &a.out_decomp_policy {
                let mut buf = Vec::new();
                save_policy(&decomp_policy, &mut buf)?;
                atomic_write(p, &buf)?;
            }
            if let Some(p) = &a.history {
                let mut buf = Vec::new();
                write_history(&history, &mut buf)?;
                atomic_write(p, &buf)?;
            }
            Ok(json!({
                "command": "train",
                "method": "grpo",
                "rounds": a.rounds,
                "first_mean_reward": history.first().map(|h| h.mean_reward),
                "last_mean_reward": history.last().map(|h| h.mean_reward),
                "out_policy": a.out_policy,
            })
            .to_string())
        }
    }
}

/// Allocator choice shared across routing workers.
enum AllocSpec {
    Policy {
        params: PolicyParams,
        margin: usize,
        alpha: f64,
        tau1: f64,
        tau2: f64,
    },
    Uniform(usize),
}

struct RoutingSetup {
    world: SimWorld,
    spec: AllocSpec,
    prm: PrmConfig,
    workers: usize,
    seed: u64,
}

fn routing_setup(a: &RoutingArgs, file: &FileConfig) -> CliResult<RoutingSetup> {
    let pool = load_pool(&a.pool)?;
    let tasks = load_tasks(&a.tasks)?;
    let seed = pick(a.seed, file.seed, 0);
    let mode = match a.gamma {
        None => SimMode::Deterministic,
        Some(gamma) => SimMode::Sigmoid { gamma },
    };
    let spec = match (&a.policy, a.model) {
        (Some(p), None) => {
            let params = load_policy(&read_input(p)?)?;
            let ap = alloc_params(a.alpha, a.tau1, a.tau2, None, file);
            AllocSpec::Policy {
                params,
                margin: a.margin,
                alpha: ap.alpha,
                tau1: ap.tau1,
                tau2: ap.tau2,
            }
        }
        (None, Some(m)) => {
            if m >= pool.len() {
                return usage(format!("--model {m} out of range for a {}-model pool", pool.len()));
            }
            AllocSpec::Uniform(m)
        }
        _ => return usage("exactly one of --policy or --model is required"),
    };
    let top = pool.len() - 1;
    let prm = if a.prm {
        PrmConfig::enabled(
            pick(a.strong_model, file.strong_model, top),
            pick(a.threshold_model, file.threshold_model, top),
        )
    } else {
        PrmConfig::disabled()
    };
    prm.validate(&pool)?;
    let workers = pick(a.workers, file.workers, 1).max(1);
    Ok(RoutingSetup {
        world: SimWorld::new(tasks, pool, mode, seed),
        spec,
        prm,
        workers,
        seed,
    })
}

fn route_all(setup: &RoutingSetup) -> CliResult<Vec<RoutingTrace>> {
    let records: Vec<TaskRecord> = setup.world.tasks().map(SimWorld::task_record).collect();
    if records.is_empty() {
        return usage("task file is empty");
    }
    route_records(setup, &records, &setup.spec, &setup.prm)
}

fn route_records(
    setup: &RoutingSetup,
    records: &[TaskRecord],
    spec: &AllocSpec,
    prm: &PrmConfig,
) -> CliResult<Vec<RoutingTrace>> {
    let world = &setup.world;
    let workers = setup.workers.min(records.len()).max(1);
    let chunk = records.len().div_ceil(workers);
    let chunks: Vec<&[TaskRecord]> = records.chunks(chunk).collect();
    let results: Vec<Result<Vec<RoutingTrace>, model_router::Error>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|slice| {
                    scope.spawn(move || {
                        let allocator: Box<dyn AllocatorPolicy> = match spec {
                            AllocSpec::Policy { params, margin, alpha, tau1, tau2 } => {
                                Box::new(PolicyAllocator {
                                    params,
                                    prob_source: world,
                                    pool: &world.pool,
                                    alpha: *alpha,
                                    tau1: *tau1,
                                    tau2: *tau2,
                                    margin: *margin,
                                })
                            }
                            AllocSpec::Uniform(m) => Box::new(UniformAllocator(*m)),
                        };
                        slice
                            .iter()
                            .map(|t| {
                                route_task(
                                    t,
                                    world,
                                    allocator.as_ref(),
                                    world,
                                    &ExactMatchChecker,
                                    &LastStepIntegrator,
                                    &world.pool,
                                    prm,
                                )
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("routing worker panicked"))
                .collect()
        });
    let mut traces = Vec::with_capacity(records.len());
    for r in results {
        traces.extend(r?);
    }
    Ok(traces)
}

fn cmd_route(a: RouteArgs, file: &FileConfig) -> CliResult<String> {
    let setup = routing_setup(&a.routing, file)?;
    let traces = route_all(&setup)?;
    let mut buf = Vec::new();
    write_traces(&traces, &mut buf)?;
    atomic_write(&a.out, &buf)?;
    let acc = traces.iter().filter(|t| t.acc).count() as f64 / traces.len() as f64;
    Ok(json!({
        "command": "route",
        "tasks": traces.len(),
        "acc": acc,
        "seed": setup.seed,
        "out": a.out,
    })
    .to_string())
}

#[derive(Serialize)]
struct BaselineComparison {
    model: usize,
    acc: f64,
    c_api_cents: f64,
    /// Routed cost over baseline cost.
    cost_ratio: f64,
    /// Routed accuracy minus baseline accuracy.
    acc_delta: f64,
}

#[derive(Serialize)]
struct EvalReport {
    metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<BaselineComparison>,
}

fn cmd_eval(a: EvalArgs, file: &FileConfig) -> CliResult<String> {
    let setup = routing_setup(&a.routing, file)?;
    let labels = match &a.labels {
        None => None,
        Some(p) => Some(read_alloc_dataset(read_input(p)?.as_bytes())?),
    };
    let traces = route_all(&setup)?;
    let metrics = compute_metrics(&traces, labels.as_deref())?;

    let baseline = match a.baseline_model {
        None => None,
        Some(m) => {
            if m >= setup.world.pool.len() {
                return usage(format!("--baseline-model {m} out of range"));
            }
            let records: Vec<TaskRecord> = setup.world.tasks().map(SimWorld::task_record).collect();
            let base_traces =
                route_records(&setup, &records, &AllocSpec::Uniform(m), &PrmConfig::disabled())?;
            let base = compute_metrics(&base_traces, None)?;
            Some(BaselineComparison {
                model: m,
                acc: base.acc,
                c_api_cents: base.c_api_cents,
                cost_ratio: if base.c_api_cents > 0.0 {
                    metrics.c_api_cents / base.c_api_cents
                } else {
                    0.0
                },
                acc_delta: metrics.acc - base.acc,
            })
        }
    };

    let report = EvalReport { metrics, baseline };
    let mut body = serde_json::to_vec_pretty(&report).map_err(model_router::Error::Json)?;
    body.push(b'\n');
    atomic_write(&a.report, &body)?;
    if let Some(p) = &a.traces {
        let mut buf = Vec::new();
        write_traces(&traces, &mut buf)?;
        atomic_write(p, &buf)?;
    }
    let mut summary = serde_json::to_value(&report).map_err(model_router::Error::Json)?;
    summary["command"] = json!("eval");
    summary["report"] = json!(a.report);
    Ok(summary.to_string())
}
