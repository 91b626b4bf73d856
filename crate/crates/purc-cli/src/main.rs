//! `purc`: route choice programs, traffic equilibrium, and flow
//! sensitivities from the command line.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical non-convergence.
//! Set `RUST_LOG=info` (or `debug`) for residual traces and timings on
//! stderr; report files stay byte-deterministic.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

mod commands;

#[derive(Parser)]
#[command(name = "purc", version, about = "Perturbed-utility route choice, traffic equilibrium, and sensitivity analysis")]
struct Cli {
    /// Cap worker threads for parallel per-type solves.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Tolerances; defaults live in the library and scenario files may
/// override them, flags win over both.
#[derive(Args, Clone, Default)]
struct ToleranceFlags {
    /// Conservation tolerance |Ax - qb|_inf for one solve.
    #[arg(long)]
    feas_tol: Option<f64>,
    /// Projected first-order-condition tolerance.
    #[arg(long)]
    stat_tol: Option<f64>,
    /// Relative flow threshold for calling a link active.
    #[arg(long)]
    eps_act: Option<f64>,
    /// Activation-boundary proximity tolerance.
    #[arg(long)]
    tol_b: Option<f64>,
    /// Iteration cap for one solve.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Equilibrium fixed-point tolerance (flow units).
    #[arg(long)]
    eq_tol: Option<f64>,
    /// Outer iteration cap for the equilibrium loop.
    #[arg(long)]
    max_outer: Option<usize>,
    /// Anderson mixing depth (0 disables acceleration).
    #[arg(long)]
    anderson: Option<usize>,
    /// Initial damping of the equilibrium cost update.
    #[arg(long)]
    gamma0: Option<f64>,
    /// Threshold separating substitutes/complements from round-off.
    #[arg(long)]
    tol_class: Option<f64>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    /// Fail unless every ordered node pair is joined by a directed path.
    #[arg(long)]
    strict: bool,
}

/// How one route choice program is specified on the command line.
#[derive(Args, Clone, Default)]
struct ProblemFlags {
    /// Origin:destination node pair, e.g. 1:4.
    #[arg(long)]
    od: Option<String>,
    /// Link attribute used as the cost vector (t0|length).
    #[arg(long)]
    cost_column: Option<String>,
    /// Perturbation as family:scale, e.g. entropic:length or quadratic:0.5.
    #[arg(long)]
    perturbation: Option<String>,
    /// Demand weight.
    #[arg(long)]
    q: Option<f64>,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[command(flatten)]
    problem: ProblemFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Args)]
struct EquilibriumArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Args)]
struct JacobianArgs {
    /// Solved-program document produced by `solve`.
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Alternatively, solve this scenario (or bare network) first.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[command(flatten)]
    problem: ProblemFlags,
    #[arg(long, default_value = "jac.csv")]
    out: PathBuf,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Args)]
struct JvpArgs {
    #[arg(long)]
    solution: PathBuf,
    /// Cost perturbation document ({"dense": [...]} or {"by_link": {...}}).
    #[arg(long)]
    delta: PathBuf,
    #[arg(long, default_value = "jvp.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EqJacobianArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Parameter family to differentiate against (kappa|t0).
    #[arg(long)]
    param: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Parameter shift as FAMILY:LINK:AMOUNT, e.g. kappa:1-2:+5% or t0:2-3:0.1.
    #[arg(long)]
    shift: String,
    /// Also re-solve the shifted equilibrium and report the difference.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value = "estimate.csv")]
    out: PathBuf,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Uncertain parameter family (kappa|t0).
    #[arg(long, default_value = "kappa")]
    param: String,
    /// Coefficient of variation of the independent parameters.
    #[arg(long)]
    cv: f64,
    /// Two-sided confidence level for reported intervals.
    #[arg(long, default_value_t = 0.90)]
    level: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Args)]
struct SubstitutionArgs {
    #[arg(long)]
    solution: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[command(flatten)]
    problem: ProblemFlags,
    #[arg(long, default_value = "pairs.csv")]
    out: PathBuf,
    #[command(flatten)]
    tolerances: ToleranceFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network or scenario: schema, attributes, connectivity,
    /// origin-destination reachability.
    Validate(ValidateArgs),
    /// Solve one route choice program at fixed costs.
    Solve(SolveArgs),
    /// Solve the multi-type congested equilibrium.
    Equilibrium(EquilibriumArgs),
    /// Jacobian of optimal flows with respect to link costs (CSV).
    Jacobian(JacobianArgs),
    /// Directional sensitivity q J delta without forming the Jacobian.
    Jvp(JvpArgs),
    /// Jacobians of equilibrium costs and flows with respect to link
    /// parameters.
    EqJacobian(EqJacobianArgs),
    /// First-order estimate of equilibrium flows after a parameter shift.
    Estimate(EstimateArgs),
    /// Delta-method uncertainty of equilibrium flows under random
    /// parameters.
    Uncertainty(UncertaintyArgs),
    /// Classify link pairs as substitutes, complements, or independent.
    Substitution(SubstitutionArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {err}");
        }
    }
    let result = match &cli.command {
        Command::Validate(args) => commands::validate(args),
        Command::Solve(args) => commands::solve(args),
        Command::Equilibrium(args) => commands::equilibrium(args),
        Command::Jacobian(args) => commands::jacobian(args),
        Command::Jvp(args) => commands::jvp(args),
        Command::EqJacobian(args) => commands::eq_jacobian(args),
        Command::Estimate(args) => commands::estimate(args),
        Command::Uncertainty(args) => commands::uncertainty(args),
        Command::Substitution(args) => commands::substitution(args),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
