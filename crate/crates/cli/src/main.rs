mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Traffic density reconstruction on road networks.
#[derive(Parser, Debug)]
#[command(name = "roadmrf", version, about)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic road network.
    GenerateNetwork(GenerateNetworkArgs),
    /// Sample complete traffic snapshots on a network.
    GenerateSnapshots(GenerateSnapshotsArgs),
    /// Hide random roads of one snapshot to produce a partial snapshot.
    Mask(MaskArgs),
    /// Fit model parameters to historical snapshots.
    Learn(LearnArgs),
    /// Fill in the unobserved roads of a partial snapshot.
    Reconstruct(ReconstructArgs),
    /// Leave-one-out evaluation over masking rates and penalties.
    Evaluate(EvaluateArgs),
    /// Bin reconstructed densities into map colors.
    ExportColors(ExportColorsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum NetworkKindArg {
    Grid,
    RandomPlanar,
}

#[derive(Args, Debug)]
struct GenerateNetworkArgs {
    #[arg(long, value_enum)]
    kind: NetworkKindArg,
    #[arg(long, required_if_eq("kind", "grid"))]
    width: Option<usize>,
    #[arg(long, required_if_eq("kind", "grid"))]
    height: Option<usize>,
    /// Vertex count for random planar networks.
    #[arg(long, required_if_eq("kind", "random-planar"))]
    n: Option<usize>,
    /// Share of optional planar edges kept, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TruthArg {
    /// Gaussian field around a hotspot-shaped mean.
    Gmrf,
    /// Hotspot bumps with random amplitudes.
    Hotspot,
}

#[derive(Args, Debug)]
struct GenerateSnapshotsArgs {
    #[arg(long)]
    network: std::path::PathBuf,
    #[arg(long, value_enum, default_value = "gmrf")]
    model: TruthArg,
    /// Take the Gaussian field parameters from a model file instead.
    #[arg(long, conflicts_with = "model")]
    from_model: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 100)]
    snapshots: usize,
    /// Number of hotspots, placed at random roads.
    #[arg(long, default_value_t = 3)]
    centers: usize,
    #[arg(long, default_value_t = 0.2)]
    peak: f64,
    /// Decay rate per hop.
    #[arg(long, default_value_t = 0.3)]
    decay: f64,
    /// Background density added to the Gaussian mean.
    #[arg(long, default_value_t = 0.02)]
    base: f64,
    /// Precision scale of the Gaussian field.
    #[arg(long, default_value_t = 200.0)]
    eta: f64,
    /// Diagonal shift of the Gaussian field used for generation.
    #[arg(long, default_value_t = 1.0)]
    gen_epsilon: f64,
    /// Replace negative draws by zero (recorded in the metadata).
    #[arg(long)]
    clamp_negative: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long)]
    network: std::path::PathBuf,
    #[arg(long)]
    snapshots: std::path::PathBuf,
    /// Row of the snapshot file to mask.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Probability that a road is hidden.
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Args, Debug)]
struct LearnArgs {
    #[arg(long)]
    network: std::path::PathBuf,
    #[arg(long)]
    snapshots: std::path::PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    max_steps: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Training report path (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<std::path::PathBuf>,
    /// Check the fitted model against the closed-form stationarity conditions.
    #[arg(long)]
    verify: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SchemeArg {
    Jacobi,
    GaussSeidel,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Sweep cap (default: ten times the number of roads).
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_enum, default_value = "gauss-seidel")]
    scheme: SchemeArg,
    /// Start from the average of observed neighbors.
    #[arg(long)]
    warm_start: bool,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    network: std::path::PathBuf,
    #[arg(long)]
    model: std::path::PathBuf,
    #[arg(long)]
    partial: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    network: std::path::PathBuf,
    #[arg(long)]
    snapshots: std::path::PathBuf,
    /// Masking probability; repeat for several.
    #[arg(long = "p", required = true)]
    p: Vec<f64>,
    /// Penalty strength; repeat for several.
    #[arg(long = "lambda", default_values_t = [0.0])]
    lambda: Vec<f64>,
    /// Random masks per held-out snapshot.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long)]
    out_dir: std::path::PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct ExportColorsArgs {
    #[arg(long)]
    reconstruction: std::path::PathBuf,
    #[arg(long, default_value_t = roadmrf::colors::DEFAULT_BIN_WIDTH)]
    bin_width: f64,
    #[arg(long)]
    out: std::path::PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECON_LOG", "warn"))
        .format_timestamp(None)
        .init();

    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .filter_map(|c| c.downcast_ref::<roadmrf::Error>())
                .any(|r| r.is_validation())
                || e.downcast_ref::<commands::UsageError>().is_some();
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
