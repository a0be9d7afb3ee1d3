//! `fmbo`: run BO benchmarks, regression ablations and kernel checks.
//!
//! Exit status: 0 success, 1 runtime failure (including failed checks),
//! 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmbo_core::cli::{cmd_bo, cmd_regress, cmd_verify, CmdError, Outcome, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fmbo", version, about = "Mixed-variable Bayesian optimization with graph-spectral kernels")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for traces, summaries and reports.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,

    /// Write logs to this file instead of stderr.
    #[arg(long, global = true)]
    log_file: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bayesian optimization on a built-in benchmark, one run per seed.
    Bo(BoArgs),
    /// Train/test regression ablation over kernels on a CSV file.
    Regress(RegressArgs),
    /// Randomized kernel property checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct BoArgs {
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    no_warm_start: bool,
    #[arg(long)]
    n_random: Option<usize>,
    #[arg(long)]
    n_starts: Option<usize>,
}

#[derive(Args, Debug)]
struct RegressArgs {
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    continuous: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    categorical: Option<Vec<String>>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ignore: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<String>>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Model log(y) instead of y.
    #[arg(long)]
    log_target: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    /// Trials for every check (default: per-check).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also check a deliberately negated kernel, which must fail.
    #[arg(long)]
    inject_negated: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply(cfg: &mut RunConfig, cmd: Command) -> Command {
    match cmd {
        Command::Bo(a) => {
            set(&mut cfg.bo.benchmark, a.benchmark.clone());
            set(&mut cfg.bo.kernel, a.kernel.clone());
            set(&mut cfg.bo.budget, a.budget);
            set(&mut cfg.bo.n_init, a.n_init);
            set(&mut cfg.bo.restarts, a.restarts);
            set(&mut cfg.bo.seeds, a.seeds.clone());
            if a.no_warm_start {
                cfg.bo.warm_start = false;
            }
            set(&mut cfg.acquire.n_random, a.n_random);
            set(&mut cfg.acquire.n_starts, a.n_starts);
            Command::Bo(a)
        }
        Command::Regress(a) => {
            let r = &mut cfg.regress;
            if a.csv.is_some() {
                r.csv = a.csv.clone();
            }
            set(&mut r.continuous, a.continuous.clone());
            set(&mut r.categorical, a.categorical.clone());
            if a.target.is_some() {
                r.target = a.target.clone();
            }
            set(&mut r.ignore, a.ignore.clone());
            set(&mut r.kernels, a.kernels.clone());
            set(&mut r.splits, a.splits);
            set(&mut r.train_fraction, a.train_fraction);
            set(&mut r.seed, a.seed);
            set(&mut r.restarts, a.restarts);
            if a.log_target {
                r.log_target = true;
            }
            Command::Regress(a)
        }
        Command::Verify(a) => {
            set(&mut cfg.verify.checks, a.checks.clone());
            if a.trials.is_some() {
                cfg.verify.trials = a.trials;
            }
            set(&mut cfg.verify.seed, a.seed);
            if a.inject_negated {
                cfg.verify.inject_negated = true;
            }
            Command::Verify(a)
        }
    }
}

fn init_logging(level: &str, file: Option<&PathBuf>) -> Result<(), CmdError> {
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| CmdError::Usage(format!("invalid log level '{level}'")))?;
    let mut b = env_logger::Builder::new();
    b.filter_level(filter).format_timestamp(None);
    if let Some(path) = file {
        let f = std::fs::File::create(path)
            .map_err(|e| CmdError::Runtime(format!("cannot open log file {}: {e}", path.display())))?;
        b.target(env_logger::Target::Pipe(Box::new(f)));
    }
    let _ = b.try_init();
    Ok(())
}

/// `FMBO_THREADS` caps the worker pool; unset means one per core.
fn init_threads() -> Result<(), CmdError> {
    let Ok(v) = std::env::var("FMBO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CmdError::Usage(format!("FMBO_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CmdError::Runtime(e.to_string()))
}

fn execute(cli: Cli) -> Result<Outcome, CmdError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.output_dir, cli.output_dir);
    set(&mut cfg.log_level, cli.log_level);
    init_logging(&cfg.log_level, cli.log_file.as_ref())?;
    init_threads()?;
    match apply(&mut cfg, cli.command) {
        Command::Bo(_) => cmd_bo(&cfg, cli.force),
        Command::Regress(_) => cmd_regress(&cfg, cli.force),
        Command::Verify(_) => cmd_verify(&cfg, cli.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(out) => {
            print!("{}", out.summary);
            for f in &out.files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("fmbo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
