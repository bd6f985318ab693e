use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scrat_core::harness::{self, SeedRange};
use scrat_core::Error;

#[derive(Parser)]
#[command(name = "scrat", version, about = "Run, validate and report benchmark ablation grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, seed) cell of a config and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed range, as `a..b`.
        #[arg(long)]
        seeds: Option<String>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Rebuild summaries from an existing results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Parse and validate a config, printing the resolved form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

enum Failure {
    Config(Error),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &PathBuf) -> Result<harness::ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(Error::Config(format!("{}: {e}", path.display()))))?;
    harness::parse_config(&text).map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("{}", harness::echo(&cfg)?);
        }
        Command::Run {
            config,
            seeds,
            out,
            jobs,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = SeedRange::parse(&s).map_err(Failure::Config)?;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            harness::validate(&cfg).map_err(Failure::Config)?;
            let mut results = harness::run_grid(&cfg, jobs)?;
            let dir = cfg.output_dir.clone();
            harness::write_report(&mut results, &dir)?;
            let failed = results.failed_cells();
            let total = results.records().count();
            eprintln!("{total} cells, {failed} failed; report in {}", dir.display());
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} cell(s) failed; see {}", dir.join("failures.md").display())));
            }
        }
        Command::Report { input } => {
            let mut results = harness::load_results(&input)?;
            harness::write_report(&mut results, &input)?;
            eprintln!("report rewritten in {}", input.display());
            if results.failed_cells() > 0 {
                return Err(Failure::Runtime(format!("{} cell(s) failed", results.failed_cells())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
