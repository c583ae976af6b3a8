//! `arw`: run Activated Random Walk experiments from the command line.
//!
//! Each subcommand runs one experiment. Flags mirror the keys of the JSON
//! config accepted by `--config`; flags given on the command line override
//! the file. Summary metrics go to stdout as `key=value` lines, full data to
//! CSV files in the output directory.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 budget exceeded,
//! 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use arw::harness::{run_experiment, Ensemble, Experiment, ExperimentConfig, Lambda};
use arw::{ArwError, Mode};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arw", version, about = "Activated Random Walk simulation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stabilize a point source of n particles at the origin.
    Aggregate(Flags),
    /// Stabilize one particle per site of a scaled region.
    Region(Flags),
    /// Stabilize a Poisson sprinkle on the torus.
    Sprinkle(Flags),
    /// Exact samples of the stationary wired chain on [1, L]^d.
    WiredSample(Flags),
    /// Density curve of the uniformly driven wired chain.
    Hockey(Flags),
    /// Run the free chain on the torus and detect its threshold time.
    Free(Flags),
    /// Run the wake chain and estimate site covariances.
    Wake(Flags),
    /// Symmetry-averaged site correlation table of an ensemble.
    Correlations(Flags),
    /// Number variance of free-chain states against the Bernoulli benchmark.
    Hyperuniformity(Flags),
    /// Quadrature margins of a region source for superharmonic test functions.
    Quadrature(Flags),
    /// Coupling times of two chains started one sleeper apart.
    Coupling(Flags),
}

#[derive(Args, Clone, Debug, Default)]
struct Flags {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Side length of the box or torus.
    #[arg(long = "L")]
    side: Option<usize>,
    /// Sleep rate; `inf` (collapsed mode only) gives internal DLA.
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<Lambda>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<u64>,
    /// literal | collapsed
    #[arg(long)]
    mode: Option<Mode>,
    /// Instruction budget per stabilization.
    #[arg(long)]
    budget: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Point-source particle count.
    #[arg(long)]
    n: Option<u64>,
    /// Poisson sprinkle mean.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    tmax: Option<f64>,
    #[arg(long)]
    tstep: Option<f64>,
    /// Particle density k / L^d.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated chain steps to record.
    #[arg(long, value_delimiter = ',')]
    record: Option<Vec<u64>>,
    #[arg(long = "r-max")]
    r_max: Option<usize>,
    /// Comma-separated box sides for count variances.
    #[arg(long, value_delimiter = ',')]
    boxes: Option<Vec<usize>>,
    /// Region such as `disk:0,0,1`, `cube:0,0:1,1`, or a `+`-joined union.
    #[arg(long)]
    region: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    /// nlog2n | n1.5 | cnlogn:<c>
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    annuli: Option<usize>,
    /// Reference density used by the estimators.
    #[arg(long)]
    zeta: Option<f64>,
    /// free | wired | point | wake
    #[arg(long)]
    ensemble: Option<Ensemble>,
    /// Number of sampled centers for quadrature test functions.
    #[arg(long)]
    centers: Option<usize>,
    /// Also write PGM snapshots of replica 0.
    #[arg(long)]
    snapshots: bool,
}

impl Command {
    fn split(self) -> (Experiment, Flags) {
        match self {
            Command::Aggregate(f) => (Experiment::Aggregate, f),
            Command::Region(f) => (Experiment::Region, f),
            Command::Sprinkle(f) => (Experiment::Sprinkle, f),
            Command::WiredSample(f) => (Experiment::WiredSample, f),
            Command::Hockey(f) => (Experiment::Hockey, f),
            Command::Free(f) => (Experiment::Free, f),
            Command::Wake(f) => (Experiment::Wake, f),
            Command::Correlations(f) => (Experiment::Correlations, f),
            Command::Hyperuniformity(f) => (Experiment::Hyperuniformity, f),
            Command::Quadrature(f) => (Experiment::Quadrature, f),
            Command::Coupling(f) => (Experiment::Coupling, f),
        }
    }
}

fn build_config(experiment: Experiment, f: Flags) -> Result<ExperimentConfig, ArwError> {
    let mut c = match &f.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            c.experiment = experiment;
            c
        }
        None => {
            let lambda = f.lambda.ok_or_else(|| ArwError::Config("--lambda is required".into()))?;
            ExperimentConfig::new(experiment, lambda.0)
        }
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = f.$field.clone() { c.$field = v.into(); })*
        };
    }
    set!(dim, lambda, mode, seed, replicas);
    macro_rules! set_opt {
        ($($field:ident),*) => {
            $(if f.$field.is_some() { c.$field = f.$field.clone(); })*
        };
    }
    set_opt!(
        side, budget, out, threads, n, t, tmax, tstep, density, steps, record, r_max, boxes, region, eps,
        threshold, annuli, zeta, ensemble, centers
    );
    c.snapshots |= f.snapshots;
    Ok(c)
}

fn exit_code(e: &ArwError) -> u8 {
    match e {
        ArwError::BudgetExceeded(_) => 3,
        ArwError::Io { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, flags) = cli.command.split();
    let result = build_config(experiment, flags).and_then(|c| run_experiment(&c));
    match result {
        Ok(report) => {
            for (k, v) in report.summary() {
                println!("{k}={v}");
            }
            println!("out={}", report.out_dir.display());
            if report.budget_exceeded() {
                eprintln!(
                    "warning: {} replica(s) ran out of budget; see manifest.json",
                    report.manifest.budget_events.len()
                );
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
