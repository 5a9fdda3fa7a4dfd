use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use flowtrace_harness::{bench, dump, scenario, stress, HarnessError};

#[derive(Parser)]
#[command(
    name = "flowtrace-harness",
    about = "Scenario, stress, benchmark, and inspection driver for the traceability middleware",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario script and check outcomes and provenance.
    Scenario {
        /// Path to the script.
        file: PathBuf,
    },
    /// Random concurrent flows, checked against the sequential model.
    Stress {
        #[arg(long, default_value_t = 8)]
        workers: usize,
        /// Flows issued by each worker.
        #[arg(long, default_value_t = 100)]
        ops: usize,
        /// Shared files the workers contend over.
        #[arg(long, default_value_t = 10)]
        resources: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Whole-run budget in seconds; exceeding it fails the run.
        #[arg(long, default_value_t = 60)]
        budget_secs: u64,
    },
    /// Measure traced vs untraced I/O latency with phase breakdown.
    Bench {
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// Comma-separated payload sizes (plain bytes, or k/m suffixes).
        #[arg(long, default_value = "1k,64k")]
        sizes: String,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        /// Write the CSV here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one resource's provenance from a running daemon.
    Dump {
        /// The daemon's process-facing address.
        #[arg(long)]
        node: SocketAddr,
        /// Canonical resource id, e.g. file://nodename/path/to/file.
        #[arg(long)]
        id: String,
    },
}

fn parse_size(token: &str) -> Result<usize, HarnessError> {
    let t = token.trim().to_ascii_lowercase();
    let (digits, unit) = match t.strip_suffix(['k', 'm']) {
        Some(d) => (d, if t.ends_with('k') { 1024 } else { 1024 * 1024 }),
        None => (t.as_str(), 1),
    };
    digits
        .parse::<usize>()
        .map(|v| v * unit)
        .map_err(|_| HarnessError::Infra(format!("bad size {token:?}")))
}

fn parse_sizes(list: &str) -> Result<Vec<usize>, HarnessError> {
    let sizes: Vec<usize> = list
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(parse_size)
        .collect::<Result<_, _>>()?;
    if sizes.is_empty() {
        return Err(HarnessError::infra("no payload sizes given"));
    }
    Ok(sizes)
}

/// Ok(true) = all assertions passed, Ok(false) = some failed.
fn execute(command: Command) -> Result<bool, HarnessError> {
    match command {
        Command::Scenario { file } => {
            let report = scenario::run_file(&file)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
        Command::Stress {
            workers,
            ops,
            resources,
            seed,
            budget_secs,
        } => {
            let mut config = stress::StressConfig::new(workers, ops, resources, seed);
            config.budget = Duration::from_secs(budget_secs);
            let report = stress::run_stress(&config)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
        Command::Bench {
            iters,
            sizes,
            warmup,
            out,
        } => {
            let mut config = bench::BenchConfig::new(iters, parse_sizes(&sizes)?);
            config.warmup = warmup;
            let records = bench::run_bench(&config)?;
            print!("{}", bench::render_table(&records));
            let csv = bench::to_csv(&records);
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)
                        .map_err(|e| HarnessError::Infra(format!("writing CSV: {e}")))?;
                    println!("csv written to {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Dump { node, id } => {
            println!("{}", dump::dump_provenance(node, &id)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ HarnessError::Assertion(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
