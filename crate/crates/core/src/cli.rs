//! Experiment runner: synthetic and file-based matrix completion and
//! multitask runs, plus the `verify` property suites.
//!
//! Every run writes `config.json` (argv and resolved parameters),
//! `trace.csv` (one row per slot) and `summary.json` into `--output-dir`.
//! Exit codes: 0 success, 2 invalid flags, 3 runtime error, 4 verification
//! failure. Failures print one JSON line `{"error": kind, "message": ...}`
//! to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{
    block_sizes, center_mc, gen_mc, gen_mc_illcond, gen_mtl, load_mc_triplets, load_mtl_dir, observed_count,
    partition_columns, partition_tasks, split_tasks, split_train_test, McInstance, McParams, McPart, MtlParams,
};
use crate::error::{Error, Result};
use crate::gossip::{default_budget, run, Geometry, GossipConfig, Mode, RunOutcome, TraceSink};
use crate::manifold::Subspace;
use crate::metrics::{
    evaluate_mc, evaluate_mc_pooled, evaluate_mtl, write_json, write_summary, AgentSummary, CsvTraceWriter,
    FrechetSummary, RunSummary, Timing, SUMMARY_SCHEMA_VERSION,
};
use crate::problems::{Task, TaskGroup, MAX_MC_LAMBDA};
use crate::verify;

/// Stream of the master seed used for data generation and splitting; the
/// gossip engine uses streams 0 to 2.
const DATA_STREAM: u64 = 3;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FLAGS: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "subspace-gossip",
    version,
    about = "Decentralized subspace learning with gossip-based Riemannian SGD"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Matrix completion on a synthetic low-rank instance.
    McSynth(McSynthArgs),
    /// Matrix completion on a triplet file.
    McFile(McFileArgs),
    /// Multitask regression on a synthetic shared-subspace instance.
    MtlSynth(MtlSynthArgs),
    /// Multitask regression on a directory of task files.
    MtlFile(MtlFileArgs),
    /// Run the geometry and gradient property suites.
    Verify(VerifyArgs),
}

/// Engine flags shared by every run subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct GossipArgs {
    /// Number of agents N on the chain.
    #[arg(long, default_value_t = 6)]
    pub agents: usize,
    /// Consensus weight ρ.
    #[arg(long, default_value_t = 1e3)]
    pub rho: f64,
    /// Stepsize numerator a in γ_k = a/(1 + b·k). Not tuned: pick per problem.
    #[arg(long = "a", default_value_t = 0.1)]
    pub stepsize_a: f64,
    /// Stepsize decay b in γ_k = a/(1 + b·k).
    #[arg(long = "b", default_value_t = 0.01)]
    pub stepsize_b: f64,
    /// Slot budget [default: 200(N−1) stochastic, 400N parallel].
    #[arg(long)]
    pub max_slots: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Stochastic)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Geometry::Grassmann)]
    pub geometry: Geometry,
    /// Right-precondition gradients by (WᵀW + ρI)⁻¹.
    #[arg(long)]
    pub precon: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Re-orthonormalize each agent every this many of its updates (0 = never).
    #[arg(long, default_value_t = 100)]
    pub reorth_every: usize,
    /// Record local costs in the trace every this many slots (0 = never).
    #[arg(long, default_value_t = 10)]
    pub trace_cadence: usize,
    /// Worker threads for parallel rounds.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McSynthArgs {
    #[arg(long, default_value_t = 500)]
    pub m: usize,
    #[arg(long, default_value_t = 12_000)]
    pub n: usize,
    /// Rank of the generated matrix.
    #[arg(long, default_value_t = 5)]
    pub r: usize,
    /// Rank of the learned subspace [default: r].
    #[arg(long)]
    pub rank: Option<usize>,
    /// Over-sampling ratio |Ω| / (mr + nr − r²).
    #[arg(long, default_value_t = 6.0)]
    pub os: f64,
    /// Condition number; switches to a geometrically decaying spectrum.
    #[arg(long)]
    pub cond: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    pub noise_sd: f64,
    /// Held-out test entries [default: min(10 000, |Ω|/5)].
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Regularization weight λ of the unobserved entries, in [0, 0.5].
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[command(flatten)]
    pub gossip: GossipArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McFileArgs {
    /// Triplet file: header `m n`, then `i j v` lines with 1-based indices.
    #[arg(long)]
    pub input: PathBuf,
    /// Separate test triplets; when absent the input is split.
    #[arg(long)]
    pub test_input: Option<PathBuf>,
    /// Fraction of entries held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Subtract the training mean before fitting.
    #[arg(long)]
    pub center: bool,
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[command(flatten)]
    pub gossip: GossipArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MtlSynthArgs {
    /// Number of tasks T.
    #[arg(long, default_value_t = 1000)]
    pub tasks: usize,
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    /// Dimension of the generating subspace.
    #[arg(long, default_value_t = 5)]
    pub r: usize,
    /// Rank of the learned subspace [default: r].
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub d_min: usize,
    #[arg(long, default_value_t = 50)]
    pub d_max: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub noise_sd: f64,
    /// Fraction of each task's samples held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Ridge weight λ of the task coefficients.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[command(flatten)]
    pub gossip: GossipArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MtlFileArgs {
    /// Directory with one task file per task: header `d m`, rows `x_1 … x_m y`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[command(flatten)]
    pub gossip: GossipArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

/// Failure of a CLI invocation, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Flags(String),
    Runtime(Error),
    Verification(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Flags(_) => EXIT_FLAGS,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Verification(_) => EXIT_VERIFY,
        }
    }

    fn line(&self) -> String {
        let (kind, message) = match self {
            CliError::Flags(m) => ("flags", m.clone()),
            CliError::Runtime(e) => ("runtime", e.to_string()),
            CliError::Verification(n) => ("verification", format!("{n} property suite(s) failed")),
        };
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn flag_error(msg: impl Into<String>) -> CliError {
    CliError::Flags(msg.into())
}

/// Parses argv, runs the command and returns the process exit code.
pub fn main<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FLAGS } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

/// Runs a parsed command.
pub fn execute(cli: &Cli, argv: &[OsString]) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::Verify(args) => {
            let results = verify::run_all(args.seed);
            let failures = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failures > 0 {
                Err(CliError::Verification(failures))
            } else {
                Ok(())
            }
        }
        Command::McSynth(args) => mc_synth(cli, args, argv),
        Command::McFile(args) => mc_file(cli, args, argv),
        Command::MtlSynth(args) => mtl_synth(cli, args, argv),
        Command::MtlFile(args) => mtl_file(cli, args, argv),
    }
}

fn gossip_config(args: &GossipArgs, rank: usize) -> std::result::Result<GossipConfig, CliError> {
    let config = GossipConfig {
        agents: args.agents,
        rank,
        rho: args.rho,
        stepsize_a: args.stepsize_a,
        stepsize_b: args.stepsize_b,
        max_slots: args.max_slots.unwrap_or_else(|| default_budget(args.mode, args.agents)),
        mode: args.mode,
        geometry: args.geometry,
        precon: args.precon,
        seed: args.seed,
        reorth_every: args.reorth_every,
        cost_cadence: args.trace_cadence,
        workers: args.workers,
    };
    config.validate().map_err(|e| flag_error(e.to_string()))?;
    Ok(config)
}

fn check_mc_lambda(lambda: f64) -> std::result::Result<(), CliError> {
    if (0.0..=MAX_MC_LAMBDA).contains(&lambda) {
        Ok(())
    } else {
        Err(flag_error(format!(
            "--lambda must lie in [0, {MAX_MC_LAMBDA}], got {lambda}"
        )))
    }
}

fn check_ridge_lambda(lambda: f64) -> std::result::Result<(), CliError> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(flag_error(format!("--lambda must be finite and >= 0, got {lambda}")))
    }
}

fn check_fraction(fraction: f64) -> std::result::Result<(), CliError> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(flag_error(format!(
            "--test-fraction must lie in (0, 1), got {fraction}"
        )))
    }
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    rng
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    argv: Vec<String>,
    command: &'a Command,
    resolved: &'a GossipConfig,
    lambda: f64,
}

/// Output directory with its `config.json` written.
fn prepare_output(cli: &Cli, argv: &[OsString], dir: &Path, config: &GossipConfig, lambda: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = ConfigEcho {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        command: &cli.command,
        resolved: config,
        lambda,
    };
    write_json(&dir.join("config.json"), &echo)
}

/// Runs the engine with a CSV trace written to `dir/trace.csv`.
fn run_traced<T: crate::problems::LocalTask>(dir: &Path, config: &GossipConfig, tasks: &[T]) -> Result<RunOutcome> {
    let path = dir.join("trace.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut writer = CsvTraceWriter::new(BufWriter::new(file), config.agents)?;
    let outcome = run(config, tasks, &mut writer as &mut dyn TraceSink)?;
    writer.into_inner()?;
    Ok(outcome)
}

/// Runs matrix completion on a prepared instance and evaluates it.
pub fn execute_mc(
    instance: &McInstance,
    config: &GossipConfig,
    lambda: f64,
    sink: &mut dyn TraceSink,
) -> Result<(RunOutcome, RunSummary)> {
    let parts = partition_columns(instance, config.agents, lambda)?;
    let shards: Vec<_> = parts.iter().map(|p| p.shard.clone()).collect();
    let outcome = run(config, &shards, sink)?;
    let summary = summarize_mc(config, &outcome, &parts, instance.offset, Timing::default())?;
    Ok((outcome, summary))
}

/// Per-agent and Fréchet-mean metrics of a matrix completion run.
pub fn summarize_mc(
    config: &GossipConfig,
    outcome: &RunOutcome,
    parts: &[McPart],
    offset: f64,
    mut timing: Timing,
) -> Result<RunSummary> {
    let start = Instant::now();
    let agents = outcome
        .agents
        .iter()
        .map(|a| {
            let part = &parts[a.shard];
            Ok(AgentSummary {
                id: a.id,
                updates: a.update_count,
                metrics: evaluate_mc(a.basis(), a.is_orthonormal(), &part.shard, &part.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frechet_mean = match &outcome.frechet_mean {
        Some(mean) => {
            let pooled: Vec<_> = parts.iter().map(|p| (&p.shard, p.test.as_slice())).collect();
            Some(FrechetSummary {
                iterations: mean.iterations,
                converged: mean.converged,
                metrics: evaluate_mc_pooled(mean.subspace.basis(), true, &pooled)?,
            })
        }
        None => None,
    };
    timing.init += outcome.init_time.as_secs_f64();
    timing.run += outcome.run_time.as_secs_f64();
    timing.evaluate += start.elapsed().as_secs_f64();
    Ok(RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        problem: "mc".into(),
        config: config.clone(),
        slots_executed: outcome.slots_executed,
        agents,
        consensus_distances: RunSummary::consensus(&outcome.final_distances),
        frechet_mean,
        offset,
        nmse_excluded_tasks: 0,
        timing,
    })
}

/// Multitask data split across agents.
#[derive(Debug, Clone)]
pub struct MtlSplit {
    pub groups: Vec<TaskGroup>,
    /// Held-out samples, grouped like `groups`.
    pub tests: Option<Vec<Vec<Task>>>,
    pub truth: Option<Subspace>,
}

impl MtlSplit {
    /// Partitions training tasks (and matching test tasks) into contiguous
    /// groups.
    pub fn new(
        m: usize,
        train: &[Task],
        test: Option<&[Task]>,
        truth: Option<Subspace>,
        agents: usize,
        lambda: f64,
    ) -> Result<Self> {
        let groups = partition_tasks(train, m, agents, lambda)?;
        let tests = test.map(|test| {
            let mut start = 0;
            block_sizes(test.len(), agents).map(|sizes| {
                sizes
                    .into_iter()
                    .map(|s| {
                        let chunk = test[start..start + s].to_vec();
                        start += s;
                        chunk
                    })
                    .collect()
            })
        });
        Ok(Self {
            groups,
            tests: tests.transpose()?,
            truth,
        })
    }
}

/// Runs multitask regression on prepared groups and evaluates it.
pub fn execute_mtl(
    split: &MtlSplit,
    config: &GossipConfig,
    sink: &mut dyn TraceSink,
) -> Result<(RunOutcome, RunSummary)> {
    let outcome = run(config, &split.groups, sink)?;
    let summary = summarize_mtl(config, &outcome, split, Timing::default())?;
    Ok((outcome, summary))
}

/// Per-agent and Fréchet-mean metrics of a multitask run.
pub fn summarize_mtl(
    config: &GossipConfig,
    outcome: &RunOutcome,
    split: &MtlSplit,
    mut timing: Timing,
) -> Result<RunSummary> {
    let start = Instant::now();
    let mut excluded = 0;
    let agents = outcome
        .agents
        .iter()
        .map(|a| {
            let test = split.tests.as_ref().map(|t| t[a.shard].as_slice());
            let (metrics, skipped) = evaluate_mtl(
                a.basis(),
                a.is_orthonormal(),
                &split.groups[a.shard],
                test,
                split.truth.as_ref(),
            )?;
            excluded += skipped;
            Ok(AgentSummary {
                id: a.id,
                updates: a.update_count,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frechet_mean = match &outcome.frechet_mean {
        Some(mean) => {
            let m = split.groups[0].m();
            let all_train: Vec<Task> = split.groups.iter().flat_map(|g| g.tasks().iter().cloned()).collect();
            let all = TaskGroup::new(m, all_train, split.groups[0].lambda())?;
            let all_test: Option<Vec<Task>> = split.tests.as_ref().map(|t| t.concat());
            let (metrics, _) = evaluate_mtl(
                mean.subspace.basis(),
                true,
                &all,
                all_test.as_deref(),
                split.truth.as_ref(),
            )?;
            Some(FrechetSummary {
                iterations: mean.iterations,
                converged: mean.converged,
                metrics,
            })
        }
        None => None,
    };
    timing.init += outcome.init_time.as_secs_f64();
    timing.run += outcome.run_time.as_secs_f64();
    timing.evaluate += start.elapsed().as_secs_f64();
    Ok(RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        problem: "mtl".into(),
        config: config.clone(),
        slots_executed: outcome.slots_executed,
        agents,
        consensus_distances: RunSummary::consensus(&outcome.final_distances),
        frechet_mean,
        offset: 0.0,
        nmse_excluded_tasks: excluded,
        timing,
    })
}

fn finish_mc(
    cli: &Cli,
    argv: &[OsString],
    gossip: &GossipArgs,
    config: &GossipConfig,
    instance: &McInstance,
    lambda: f64,
    generate_secs: f64,
) -> std::result::Result<(), CliError> {
    let dir = &gossip.output_dir;
    prepare_output(cli, argv, dir, config, lambda)?;
    let parts = partition_columns(instance, config.agents, lambda)?;
    let shards: Vec<_> = parts.iter().map(|p| p.shard.clone()).collect();
    let outcome = run_traced(dir, config, &shards)?;
    let timing = Timing {
        generate: generate_secs,
        ..Timing::default()
    };
    let summary = summarize_mc(config, &outcome, &parts, instance.offset, timing)?;
    write_summary(&dir.join("summary.json"), &summary)?;
    print_brief(&summary);
    Ok(())
}

fn finish_mtl(
    cli: &Cli,
    argv: &[OsString],
    gossip: &GossipArgs,
    config: &GossipConfig,
    split: &MtlSplit,
    lambda: f64,
    generate_secs: f64,
) -> std::result::Result<(), CliError> {
    let dir = &gossip.output_dir;
    prepare_output(cli, argv, dir, config, lambda)?;
    let outcome = run_traced(dir, config, &split.groups)?;
    let timing = Timing {
        generate: generate_secs,
        ..Timing::default()
    };
    let summary = summarize_mtl(config, &outcome, split, timing)?;
    write_summary(&dir.join("summary.json"), &summary)?;
    print_brief(&summary);
    Ok(())
}

fn print_brief(summary: &RunSummary) {
    let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4e}"));
    for a in &summary.agents {
        println!(
            "agent {}: updates {} train_mse {} test_rmse {} test_nmse {} subspace_error {}",
            a.id,
            a.updates,
            fmt(a.metrics.train_mse),
            fmt(a.metrics.test_rmse),
            fmt(a.metrics.test_nmse),
            fmt(a.metrics.subspace_error)
        );
    }
    let d: Vec<String> = summary.consensus_distances.iter().map(|d| fmt(*d)).collect();
    println!("consensus distances: {}", d.join(" "));
}

fn mc_synth(cli: &Cli, args: &McSynthArgs, argv: &[OsString]) -> std::result::Result<(), CliError> {
    let rank = args.rank.unwrap_or(args.r);
    let config = gossip_config(&args.gossip, rank)?;
    check_mc_lambda(args.lambda)?;
    if args.m == 0 || args.n == 0 || args.r == 0 || args.r > args.m.min(args.n) {
        return Err(flag_error("need 1 <= r <= min(m, n)"));
    }
    if rank > args.m {
        return Err(flag_error(format!("--rank {rank} exceeds m = {}", args.m)));
    }
    if args.gossip.agents > args.n {
        return Err(flag_error(format!(
            "{} agents but only {} columns",
            args.gossip.agents, args.n
        )));
    }
    let observed = observed_count(args.m, args.n, args.r, args.os);
    let params = McParams {
        m: args.m,
        n: args.n,
        r: args.r,
        os: args.os,
        noise_sd: args.noise_sd,
        test_size: args.test_size.unwrap_or((observed / 5).min(10_000)),
    };
    let start = Instant::now();
    let mut rng = data_rng(args.gossip.seed);
    let generated = match args.cond {
        Some(cond) => gen_mc_illcond(&params, cond, &mut rng),
        None => gen_mc(&params, &mut rng),
    };
    let instance = generated.map_err(|e| match e {
        Error::InvalidArgument(m) => flag_error(m),
        other => CliError::Runtime(other),
    })?;
    finish_mc(
        cli,
        argv,
        &args.gossip,
        &config,
        &instance,
        args.lambda,
        start.elapsed().as_secs_f64(),
    )
}

fn mc_file(cli: &Cli, args: &McFileArgs, argv: &[OsString]) -> std::result::Result<(), CliError> {
    let config = gossip_config(&args.gossip, args.rank)?;
    check_mc_lambda(args.lambda)?;
    check_fraction(args.test_fraction)?;
    let start = Instant::now();
    let loaded = load_mc_triplets(&args.input)?;
    if args.rank > loaded.m {
        return Err(flag_error(format!("--rank {} exceeds m = {}", args.rank, loaded.m)));
    }
    let mut instance = match &args.test_input {
        Some(path) => {
            let test = load_mc_triplets(path)?;
            if (test.m, test.n) != (loaded.m, loaded.n) {
                return Err(CliError::Runtime(Error::InvalidArgument(format!(
                    "test file is {}x{}, training file {}x{}",
                    test.m, test.n, loaded.m, loaded.n
                ))));
            }
            McInstance {
                test: test.train,
                ..loaded
            }
        }
        None => split_train_test(&loaded, 1.0 - args.test_fraction, &mut data_rng(args.gossip.seed))?,
    };
    if args.center {
        center_mc(&mut instance)?;
    }
    finish_mc(
        cli,
        argv,
        &args.gossip,
        &config,
        &instance,
        args.lambda,
        start.elapsed().as_secs_f64(),
    )
}

fn mtl_synth(cli: &Cli, args: &MtlSynthArgs, argv: &[OsString]) -> std::result::Result<(), CliError> {
    let rank = args.rank.unwrap_or(args.r);
    let config = gossip_config(&args.gossip, rank)?;
    check_ridge_lambda(args.lambda)?;
    check_fraction(args.test_fraction)?;
    if rank > args.m {
        return Err(flag_error(format!("--rank {rank} exceeds m = {}", args.m)));
    }
    if args.gossip.agents > args.tasks {
        return Err(flag_error(format!(
            "{} agents but only {} tasks",
            args.gossip.agents, args.tasks
        )));
    }
    if args.d_min < 2 {
        return Err(flag_error("--d-min must be >= 2 so every task has a test sample"));
    }
    let params = MtlParams {
        tasks: args.tasks,
        m: args.m,
        r: args.r,
        d_min: args.d_min,
        d_max: args.d_max,
        noise_sd: args.noise_sd,
    };
    let start = Instant::now();
    let mut rng = data_rng(args.gossip.seed);
    let instance = gen_mtl(&params, &mut rng).map_err(|e| match e {
        Error::InvalidArgument(m) => flag_error(m),
        other => CliError::Runtime(other),
    })?;
    let (train, test) = split_tasks(&instance.tasks, 1.0 - args.test_fraction, &mut rng)?;
    let split = MtlSplit::new(
        args.m,
        &train,
        Some(&test),
        instance.truth,
        args.gossip.agents,
        args.lambda,
    )?;
    finish_mtl(
        cli,
        argv,
        &args.gossip,
        &config,
        &split,
        args.lambda,
        start.elapsed().as_secs_f64(),
    )
}

fn mtl_file(cli: &Cli, args: &MtlFileArgs, argv: &[OsString]) -> std::result::Result<(), CliError> {
    let config = gossip_config(&args.gossip, args.rank)?;
    check_ridge_lambda(args.lambda)?;
    check_fraction(args.test_fraction)?;
    let start = Instant::now();
    let instance = load_mtl_dir(&args.input)?;
    if args.rank > instance.m {
        return Err(flag_error(format!("--rank {} exceeds m = {}", args.rank, instance.m)));
    }
    if args.gossip.agents > instance.tasks.len() {
        return Err(flag_error(format!(
            "{} agents but only {} tasks",
            args.gossip.agents,
            instance.tasks.len()
        )));
    }
    let (train, test) = split_tasks(
        &instance.tasks,
        1.0 - args.test_fraction,
        &mut data_rng(args.gossip.seed),
    )?;
    let split = MtlSplit::new(instance.m, &train, Some(&test), None, args.gossip.agents, args.lambda)?;
    finish_mtl(
        cli,
        argv,
        &args.gossip,
        &config,
        &split,
        args.lambda,
        start.elapsed().as_secs_f64(),
    )
}
