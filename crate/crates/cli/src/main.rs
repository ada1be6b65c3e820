use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prunelab::experiment::{self, summarize::write_summary_csv, RunConfig};
use prunelab::landscape::{ToyApprox, ToyCase};
use prunelab::oracle::{self, Check};
use prunelab::{Error, ErrorKind, ExecMode};

/// Second-order pruning experiments on synthetic multi-task suites.
#[derive(Debug, Parser)]
#[command(name = "prunelab", version)]
struct Cli {
    /// Worker threads for data-parallel loops (defaults to all cores).
    #[arg(long, env = "PRUNELAB_WORKERS", global = true)]
    workers: Option<usize>,

    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a pruning sweep described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results CSV into per-group mean and std.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Emit the loss grid of a canonical two-weight toy case.
    Landscape {
        /// aligned, misaligned, iso, diag or cross
        #[arg(long)]
        case: String,
        /// magnitude, diag, block or exact
        #[arg(long)]
        approx: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare fast paths against slow references.
    Oracle {
        /// gradient, hessian, obs, kfac or ridge
        #[arg(long)]
        check: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Lib(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    match dispatch(cli.command, mode) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(2),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Io => 3,
            })
        }
    }
}

fn dispatch(command: Command, mode: ExecMode) -> Result<(), Failure> {
    match command {
        Command::Run { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let report = experiment::run(&cfg, mode)?;
            println!(
                "wrote {} rows ({} expected) to {}; leakage {}; incomplete cells {}",
                report.records.len(),
                report.expected_rows,
                report.out_dir.display(),
                report.leakage,
                report.failures.len()
            );
            if report.leakage != 0 {
                return Err(Error::InvalidArgument(format!("transfer leakage detected ({} reads)", report.leakage)).into());
            }
        }
        Command::Summarize { input } => {
            let rows = experiment::summarize_file(&input)?;
            let stdout = std::io::stdout();
            write_summary_csv(stdout.lock(), &rows).map_err(|e| Error::io("<stdout>", e))?;
        }
        Command::Landscape { case, approx, out } => {
            let case: ToyCase = case.parse()?;
            let approx: ToyApprox = approx.parse()?;
            let art = experiment::landscape_case(case, approx, &out)?;
            println!("wrote {} (argmin_agreement = {})", art.csv.display(), art.argmin_agreement);
        }
        Command::Oracle { check, seed } => {
            let check: Check = check.parse()?;
            let report = oracle::run_check(check, seed)?;
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Checks);
            }
        }
    }
    Ok(())
}
