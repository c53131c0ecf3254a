//! Command-line front end. Every command is a thin wrapper over library
//! calls; exit codes are 0 on success, 1 for usage or config errors and 2
//! for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::EchoConfig;
use crate::diagnostics::{compare_runs, comparison_csv, diagnose_run, diagnostics_csv, DEFAULT_MIN_RUN};
use crate::engine::{describe, read_calibrated_high, run_experiment};
use crate::error::{EchoError, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::optimizer::AdvantageMode;
use crate::policy::named_stream;
use crate::rewards::{simulate_votes, vote_win_probabilities, MAX_EXACT_ANSWERS};
use crate::rollout::ScheduleMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "echo", version, about = "Test-time RL with entropy/confidence branching on toy policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a test-time training experiment.
    Run(RunArgs),
    /// Compare the analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Budget-allocation statistics for one run directory.
    Diagnose(DiagnoseArgs),
    /// Paired per-prompt differences between two runs (second minus first).
    Compare(CompareArgs),
    /// Majority-vote win rates: exact odds next to a simulation.
    VoteSim(VoteSimArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "ECHO_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// KEY=VALUE, repeatable; applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub schedule_mode: Option<ScheduleMode>,
    /// Replace artifacts of an earlier run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 256)]
    pub coordinates: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0.001)]
    pub kl_coef: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "hybrid")]
    pub advantage_mode: AdvantageMode,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub run_dir: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Entropy threshold for continuity; defaults to the run's calibrated
    /// upper bound.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MIN_RUN)]
    pub min_run: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shared entropy threshold; defaults to the first run's.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MIN_RUN)]
    pub min_run: usize,
}

#[derive(Debug, Args)]
pub struct VoteSimArgs {
    /// Comma-separated probabilities of the distinct answers.
    #[arg(long, value_delimiter = ',', required = true)]
    pub probs: Vec<f64>,
    /// Probability that a draw has no parseable answer.
    #[arg(long, default_value_t = 0.0)]
    pub no_answer: f64,
    #[arg(short = 'g', long, default_value_t = 64)]
    pub group_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &EchoError) -> i32 {
    match err {
        EchoError::Config(_) | EchoError::OutputExists(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn report_error(err: &EchoError) -> i32 {
    match err {
        EchoError::Config(problems) => {
            eprintln!("error: invalid configuration");
            for p in problems {
                eprintln!("  {p}");
            }
        }
        other => eprintln!("error: {other}"),
    }
    exit_code(err)
}

/// Builds the run config: defaults, then the file, then `--seed`,
/// `--schedule-mode` and the overrides in order.
pub fn resolve_config(args: &RunArgs) -> Result<EchoConfig> {
    let mut cfg = match &args.config {
        Some(path) => EchoConfig::load(path)?,
        None => EchoConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.schedule_mode {
        cfg.schedule_mode = mode;
    }
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let summary = run_experiment(&cfg, &args.out, args.force)?;
    log::info!("{}", describe(&summary));
    println!("{}", summary.out_dir.display());
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cfg = GradcheckConfig {
        coordinates: args.coordinates,
        tolerance: args.tolerance,
        step: args.step,
        kl_coef: args.kl_coef,
        seed: args.seed,
        advantage_mode: args.advantage_mode,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    println!("{report}");
    Ok(report.passed)
}

/// Entropy threshold for a run: calibrated bound, else the snapshot's
/// configured bound.
pub fn run_threshold(run_dir: &Path) -> Result<f64> {
    if let Some(h) = read_calibrated_high(run_dir)? {
        return Ok(h);
    }
    let snapshot = run_dir.join("config.cfg");
    if snapshot.exists() {
        return Ok(EchoConfig::load(&snapshot)?.scheduler.entropy_high);
    }
    Ok(EchoConfig::default().scheduler.entropy_high)
}

fn run_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| EchoError::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let threshold = match args.threshold {
        Some(t) => t,
        None => run_threshold(&args.run_dir)?,
    };
    let rows = diagnose_run(&args.run_dir, &run_id(&args.run_dir), threshold, args.min_run)?;
    emit(&args.out, &diagnostics_csv(&rows))
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let threshold = match args.threshold {
        Some(t) => t,
        None => run_threshold(&args.run_a)?,
    };
    let a = diagnose_run(&args.run_a, &run_id(&args.run_a), threshold, args.min_run)?;
    let b = diagnose_run(&args.run_b, &run_id(&args.run_b), threshold, args.min_run)?;
    emit(&args.out, &comparison_csv(&compare_runs(&a, &b)?))
}

pub fn cmd_vote_sim(args: &VoteSimArgs) -> Result<()> {
    let mut rng = named_stream(args.seed, "vote-sim", 0, 0);
    let sim = simulate_votes(&args.probs, args.no_answer, args.group_size, args.trials, &mut rng)?;
    let exact = if args.probs.len() <= MAX_EXACT_ANSWERS {
        Some(vote_win_probabilities(&args.probs, args.no_answer, args.group_size)?)
    } else {
        None
    };
    println!("answer,prob,simulated_win,exact_win");
    for (i, p) in args.probs.iter().enumerate() {
        let e = exact.as_ref().map(|o| o.win[i].to_string()).unwrap_or_default();
        println!("{i},{p},{},{e}", sim.win[i]);
    }
    let e = exact.as_ref().map(|o| o.failure.to_string()).unwrap_or_default();
    println!("none,{},{},{e}", args.no_answer, sim.failure);
    Ok(())
}

pub fn execute(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|ok| if ok { EXIT_OK } else { EXIT_RUNTIME }),
        Command::Diagnose(a) => cmd_diagnose(a).map(|_| EXIT_OK),
        Command::Compare(a) => cmd_compare(a).map(|_| EXIT_OK),
        Command::VoteSim(a) => cmd_vote_sim(a).map(|_| EXIT_OK),
    };
    result.unwrap_or_else(|e| report_error(&e))
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
