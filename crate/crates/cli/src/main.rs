mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "switchgrad",
    version,
    about = "HJB solver with gradient constraint and regime switching"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SWITCHGRAD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check an instance against the model assumptions.
    Validate { instance: PathBuf },
    /// Solve the penalized system at fixed (eps, delta).
    Solve(SolveArgs),
    /// Run the delta and eps continuation and extract regions.
    Limit(LimitArgs),
    /// Recompute the region map from stored limit artifacts.
    Regions(RegionsArgs),
    /// Monte Carlo verification of the feedback policy.
    Simulate(SimulateArgs),
    /// Convert stored JSON fields to CSV.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    pub instance: PathBuf,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Nodes per axis (at least 11).
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum MethodArg {
    Newton,
    Picard,
}

#[derive(Args, Debug)]
pub struct LimitArgs {
    pub instance: PathBuf,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Comma-separated, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Skip the exact switching solve after each delta sweep.
    #[arg(long)]
    pub no_exact_switching: bool,
    #[arg(long)]
    pub tol_hjb: Option<f64>,
    #[arg(long)]
    pub tol_switch: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RegionsArgs {
    pub instance: PathBuf,
    #[arg(long)]
    pub tol_switch: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    pub instance: PathBuf,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start point, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Start regime (1-based).
    #[arg(long)]
    pub l0: Option<usize>,
    /// Start chain state (1-based).
    #[arg(long)]
    pub i0: Option<usize>,
    #[arg(long)]
    pub probe_time: Option<f64>,
    /// Time step of the martingale check; defaults to --dt.
    #[arg(long)]
    pub probe_dt: Option<f64>,
    /// Write the first N paths to paths.csv.
    #[arg(long)]
    pub dump_paths: Option<usize>,
    /// Also estimate with a 100x looser switching tolerance.
    #[arg(long)]
    pub sensitivity: bool,
    /// Run the limit first instead of reading stored artifacts.
    #[arg(long)]
    pub inline: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    pub instance: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: thread count must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let threads = rayon::current_num_threads();
    let result = match cli.command {
        Command::Validate { instance } => commands::validate(&instance),
        Command::Solve(a) => commands::solve(&a, threads),
        Command::Limit(a) => commands::limit(&a, threads),
        Command::Regions(a) => commands::regions(&a, threads),
        Command::Simulate(a) => commands::simulate(&a, threads),
        Command::Export(a) => commands::export(&a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Domain(m) | CliError::Numerical(m) => write!(f, "{m}"),
            CliError::MissingArtifact { path, command } => write!(
                f,
                "missing artifact {}: run `switchgrad {command}` with the same --out first",
                path.display()
            ),
        }
    }
}
