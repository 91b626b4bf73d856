//! Subcommand implementations.
//!
//! Every handler reads inputs, runs the corresponding library call, and
//! writes deterministic reports (timings and residual traces go to the
//! log, never into report files).

use nalgebra::DVector;
use std::path::{Path, PathBuf};
use std::time::Instant;

use purc::analysis::{self, ParamFamily, ParameterSpec, UncertaintyInput};
use purc::equilibrium::{
    solve_equilibrium, EquilibriumError, EquilibriumOptions, EquilibriumProblem,
    EquilibriumSolution,
};
use purc::network::{self, Network};
use purc::perturbation::{NamedScale, PerturbationFamily, PerturbationSpec, ScaleRule};
use purc::report::{self, DeltaFile, EquilibriumFile, SolutionFile};
use purc::scenario::Scenario;
use purc::sensitivity;
use purc::solver::{solve_purc, PurcProblem, PurcSolution, SolveError, SolverOptions};

use crate::{
    EqJacobianArgs, EstimateArgs, JacobianArgs, JvpArgs, ProblemFlags, SolveArgs,
    SubstitutionArgs, ToleranceFlags, UncertaintyArgs, ValidateArgs,
};

/// Failures classified by exit code: input errors exit 1, numerical
/// non-convergence exits 2.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    NonConvergence(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "{msg}"),
            CliError::NonConvergence(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::NonConvergence(_) => 2,
        }
    }

    fn input(err: impl std::fmt::Display) -> Self {
        CliError::Input(err.to_string())
    }
}

macro_rules! input_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::input(err)
            }
        })*
    };
}

input_from!(
    purc::network::NetworkError,
    purc::scenario::ScenarioError,
    purc::perturbation::PerturbationError,
    purc::sensitivity::SensitivityError,
    purc::analysis::AnalysisError,
    purc::equilibrium::BprError,
    std::io::Error
);

fn apply_solver_flags(options: &mut SolverOptions, scenario: Option<&Scenario>, flags: &ToleranceFlags) {
    if let Some(tols) = scenario.and_then(|s| s.tolerances.as_ref()) {
        if let Some(v) = tols.feasibility {
            options.feasibility_tol = v;
        }
        if let Some(v) = tols.stationarity {
            options.stationarity_tol = v;
        }
        if let Some(v) = tols.active_threshold {
            options.active_threshold = v;
        }
        if let Some(v) = tols.max_iterations {
            options.max_iterations = v;
        }
    }
    if let Some(v) = flags.feas_tol {
        options.feasibility_tol = v;
    }
    if let Some(v) = flags.stat_tol {
        options.stationarity_tol = v;
    }
    if let Some(v) = flags.eps_act {
        options.active_threshold = v;
    }
    if let Some(v) = flags.max_iter {
        options.max_iterations = v;
    }
}

fn apply_equilibrium_flags(
    options: &mut EquilibriumOptions,
    scenario: Option<&Scenario>,
    flags: &ToleranceFlags,
) {
    apply_solver_flags(&mut options.solver, scenario, flags);
    if let Some(tols) = scenario.and_then(|s| s.tolerances.as_ref()) {
        if let Some(v) = tols.equilibrium {
            options.tol = v;
        }
        if let Some(v) = tols.max_outer_iterations {
            options.max_outer_iterations = v;
        }
        if let Some(v) = tols.anderson_depth {
            options.anderson_depth = v;
        }
        if let Some(v) = tols.gamma0 {
            options.gamma0 = v;
        }
    }
    if let Some(v) = flags.eq_tol {
        options.tol = v;
    }
    if let Some(v) = flags.max_outer {
        options.max_outer_iterations = v;
    }
    if let Some(v) = flags.anderson {
        options.anderson_depth = v;
    }
    if let Some(v) = flags.gamma0 {
        options.gamma0 = v;
    }
}

fn parse_od(text: &str) -> Result<(String, String), CliError> {
    let (origin, destination) = text
        .split_once(':')
        .ok_or_else(|| CliError::Input(format!("--od expects ORIGIN:DESTINATION, got `{text}`")))?;
    Ok((origin.to_string(), destination.to_string()))
}

fn parse_perturbation(text: &str, network: &Network) -> Result<PerturbationSpec, CliError> {
    let (family, scale) = text.split_once(':').unwrap_or((text, "length"));
    let family = match family {
        "entropic" => PerturbationFamily::Entropic,
        "quadratic" => PerturbationFamily::Quadratic,
        other => {
            return Err(CliError::Input(format!(
                "unknown perturbation family `{other}` (entropic|quadratic)"
            )))
        }
    };
    let rule = match scale {
        "length" => ScaleRule::Named(NamedScale::Length),
        "one" => ScaleRule::Named(NamedScale::One),
        "t0" => ScaleRule::Named(NamedScale::T0),
        number => ScaleRule::Constant(number.parse::<f64>().map_err(|_| {
            CliError::Input(format!(
                "perturbation scale must be length|one|t0|<number>, got `{number}`"
            ))
        })?),
    };
    Ok(PerturbationSpec::from_rule(family, &rule, network)?)
}

pub fn parse_param(text: &str) -> Result<ParamFamily, CliError> {
    match text {
        "kappa" | "capacity" => Ok(ParamFamily::Kappa),
        "t0" => Ok(ParamFamily::T0),
        other => Err(CliError::Input(format!(
            "unknown parameter family `{other}` (kappa|t0)"
        ))),
    }
}

struct ShiftRequest {
    family: ParamFamily,
    link: String,
    /// Relative (fraction) or absolute shift.
    amount: ShiftAmount,
}

enum ShiftAmount {
    Relative(f64),
    Absolute(f64),
}

fn parse_shift(text: &str) -> Result<ShiftRequest, CliError> {
    let parts: Vec<&str> = text.splitn(3, ':').collect();
    if parts.len() != 3 {
        return Err(CliError::Input(format!(
            "--shift expects FAMILY:LINK:AMOUNT (e.g. kappa:1-2:+5%), got `{text}`"
        )));
    }
    let family = parse_param(parts[0])?;
    let amount_text = parts[2];
    let amount = if let Some(pct) = amount_text.strip_suffix('%') {
        ShiftAmount::Relative(
            pct.parse::<f64>()
                .map_err(|_| CliError::Input(format!("bad shift percentage `{amount_text}`")))?
                / 100.0,
        )
    } else {
        ShiftAmount::Absolute(
            amount_text
                .parse::<f64>()
                .map_err(|_| CliError::Input(format!("bad shift amount `{amount_text}`")))?,
        )
    };
    Ok(ShiftRequest {
        family,
        link: parts[1].to_string(),
        amount,
    })
}

fn load_scenario(path: &Path) -> Result<(Scenario, Network), CliError> {
    let scenario = Scenario::load(path)?;
    let network = scenario.load_network()?;
    Ok((scenario, network))
}

fn param_values(network: &Network, family: ParamFamily) -> DVector<f64> {
    match family {
        ParamFamily::T0 => network.free_flow_times(),
        ParamFamily::Kappa => network.capacities(),
    }
}

pub fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let (network, scenario) = match (&args.scenario, &args.network) {
        (Some(path), _) => {
            let (scenario, network) = load_scenario(path)?;
            (network, Some(scenario))
        }
        (None, Some(path)) => (load_network_file(path)?, None),
        (None, None) => {
            return Err(CliError::Input(
                "validate needs --scenario or --network".into(),
            ))
        }
    };
    println!(
        "network: {} nodes, {} links",
        network.num_nodes(),
        network.num_links()
    );
    let report = network::validate_connected(&network);
    let weak = network::validate_weakly_connected(&network);
    println!("strong connectivity: {report}");
    println!("weak connectivity: {}", if weak { "connected" } else { "disconnected" });
    if args.strict && !report.strongly_connected {
        return Err(CliError::Input(format!(
            "--strict: network fails strong connectivity ({} unreachable ordered pairs)",
            report.unreachable_pairs.len()
        )));
    }
    if let Some(scenario) = &scenario {
        scenario.perturbation_spec(&network)?;
        scenario.static_cost_vector(&network)?;
        for demand in scenario.demand_vectors(&network)? {
            if !network::od_reachable(&network, &demand) {
                return Err(CliError::Input(format!(
                    "destination `{}` unreachable from origin `{}`",
                    network.node_id(demand.destination),
                    network.node_id(demand.origin)
                )));
            }
        }
        println!("demands: {} (all reachable)", scenario.demands.len());
        println!("scenario: valid");
    }
    Ok(())
}

fn load_network_file(path: &Path) -> Result<Network, CliError> {
    let net = if path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
    {
        Network::from_csv_file(path)?
    } else {
        Network::from_json_file(path)?
    };
    Ok(net)
}

/// Builds the single route choice program a scenario (or flags) describes.
fn build_purc_problem<'a>(
    network: &'a Network,
    scenario: Option<&Scenario>,
    flags: &ProblemFlags,
    tolerances: &ToleranceFlags,
) -> Result<PurcProblem<'a>, CliError> {
    let costs = if let Some(column) = &flags.cost_column {
        match column.as_str() {
            "t0" => network.free_flow_times(),
            "length" => network.lengths(),
            other => {
                return Err(CliError::Input(format!(
                    "unknown cost column `{other}` (t0|length)"
                )))
            }
        }
    } else if let Some(scenario) = scenario {
        scenario
            .static_cost_vector(network)?
            .ok_or_else(|| CliError::Input("scenario has no static costs; use `equilibrium` for flow-dependent costs".into()))?
    } else {
        network.free_flow_times()
    };

    let perturbation = if let Some(text) = &flags.perturbation {
        parse_perturbation(text, network)?
    } else if let Some(scenario) = scenario {
        scenario.perturbation_spec(network)?
    } else {
        return Err(CliError::Input(
            "no perturbation given (use --perturbation or a scenario)".into(),
        ))
    };

    let (origin, destination, q) = if let Some(od) = &flags.od {
        let (o, d) = parse_od(od)?;
        (o, d, flags.q.unwrap_or(1.0))
    } else if let Some(scenario) = scenario {
        if scenario.demands.len() != 1 {
            return Err(CliError::Input(format!(
                "scenario lists {} demands; pick one with --od",
                scenario.demands.len()
            )));
        }
        let d = &scenario.demands[0];
        (
            d.origin.clone(),
            d.destination.clone(),
            flags.q.unwrap_or(d.q),
        )
    } else {
        return Err(CliError::Input("no origin-destination pair given".into()));
    };
    let demand = network::unit_demand(network, &origin, &destination)?;

    let mut problem = PurcProblem::new(network, costs, demand, perturbation).with_demand_scale(q);
    apply_solver_flags(&mut problem.options, scenario, tolerances);
    Ok(problem)
}

fn run_solve(problem: &PurcProblem) -> Result<(PurcSolution, bool), CliError> {
    let started = Instant::now();
    match solve_purc(problem) {
        Ok(solution) => {
            log::info!(
                "solve: {} iterations, feasibility {:.2e}, stationarity {:.2e}, {:?}",
                solution.iterations,
                solution.feasibility_residual,
                solution.stationarity_residual,
                started.elapsed()
            );
            Ok((solution, true))
        }
        Err(SolveError::NotConverged {
            reason,
            iterations,
            residual,
            best,
        }) => {
            log::warn!("solve stopped ({reason}) after {iterations} iterations, residual {residual:.2e}");
            Ok((*best, false))
        }
        Err(other) => Err(CliError::input(other)),
    }
}

pub fn solve(args: &SolveArgs) -> Result<(), CliError> {
    let (scenario, network) = match (&args.scenario, &args.network) {
        (Some(path), _) => {
            let (s, n) = load_scenario(path)?;
            (Some(s), n)
        }
        (None, Some(path)) => (None, load_network_file(path)?),
        (None, None) => {
            return Err(CliError::Input("solve needs --scenario or --network".into()))
        }
    };
    let problem = build_purc_problem(&network, scenario.as_ref(), &args.problem, &args.tolerances)?;
    let (solution, converged) = run_solve(&problem)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("solution.json"));
    SolutionFile::new(&network, &solution, &problem.perturbation).save(&out)?;
    println!(
        "wrote {} ({} active links, objective {})",
        out.display(),
        solution.num_active(),
        report::fmt_float(solution.objective)
    );
    if !converged {
        return Err(CliError::NonConvergence(format!(
            "solver residual {:.2e} above tolerance; best iterate written to {}",
            solution.feasibility_residual,
            out.display()
        )));
    }
    Ok(())
}

/// Restores a solved program from `--solution`, or solves one from
/// scenario/network flags.
fn solution_source(
    solution_path: Option<&PathBuf>,
    scenario_path: Option<&PathBuf>,
    network_path: Option<&PathBuf>,
    flags: &ProblemFlags,
    tolerances: &ToleranceFlags,
) -> Result<(Network, PurcSolution, PerturbationSpec), CliError> {
    if let Some(path) = solution_path {
        let file = SolutionFile::load(path)?;
        let spec = file.perturbation.clone();
        let (network, solution) = file.restore()?;
        return Ok((network, solution, spec));
    }
    if scenario_path.is_some() || network_path.is_some() {
        let (scenario, network) = match (scenario_path, network_path) {
            (Some(path), _) => {
                let (s, n) = load_scenario(path)?;
                (Some(s), n)
            }
            (None, Some(path)) => (None, load_network_file(path)?),
            _ => unreachable!(),
        };
        let problem = build_purc_problem(&network, scenario.as_ref(), flags, tolerances)?;
        let (solution, converged) = run_solve(&problem)?;
        if !converged {
            return Err(CliError::NonConvergence(
                "underlying solve did not converge".into(),
            ));
        }
        let spec = problem.perturbation.clone();
        return Ok((network, solution, spec));
    }
    Err(CliError::Input(
        "need --solution, --scenario, or --network".into(),
    ))
}

pub fn jacobian(args: &JacobianArgs) -> Result<(), CliError> {
    let (network, solution, spec) = solution_source(
        args.solution.as_ref(),
        args.scenario.as_ref(),
        args.network.as_ref(),
        &args.problem,
        &args.tolerances,
    )?;
    let tol_b = args
        .tolerances
        .tol_b
        .unwrap_or(sensitivity::DEFAULT_BOUNDARY_TOL);
    let boundary = sensitivity::boundary_check(&solution, tol_b);
    if boundary.near_boundary() {
        log::warn!(
            "solution is near the activation boundary ({} nearly-zero active, {} nearly-active inactive links); Jacobian flagged unreliable",
            boundary.nearly_zero_active.len(),
            boundary.nearly_active_inactive.len()
        );
    }
    let jac = sensitivity::purc_jacobian_for(&network, &solution, &spec)?;
    let ids = network.link_ids();
    report::emit_table_file(&args.out, "dx/dc", &ids, &ids, &jac.matrix)?;
    println!(
        "wrote {} ({}x{} Jacobian{})",
        args.out.display(),
        ids.len(),
        ids.len(),
        if jac.near_boundary {
            ", near activation boundary"
        } else {
            ""
        }
    );
    Ok(())
}

pub fn jvp(args: &JvpArgs) -> Result<(), CliError> {
    let file = SolutionFile::load(&args.solution)?;
    let spec = file.perturbation.clone();
    let (network, solution) = file.restore()?;
    let delta = DeltaFile::load(&args.delta)?.to_vector(&network)?;
    let change = sensitivity::directional_sensitivity(&network, &solution, &spec, &delta)
        .map_err(CliError::input)?;
    let ids = network.link_ids();
    report::emit_records_file(
        &args.out,
        &["link", "delta", "flow_change"],
        (0..ids.len()).map(|j| {
            vec![
                ids[j].clone(),
                report::fmt_float(delta[j]),
                report::fmt_float(change[j]),
            ]
        }),
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn equilibrium(args: &crate::EquilibriumArgs) -> Result<(), CliError> {
    let (scenario, network) = load_scenario(&args.scenario)?;
    let (eq, converged) = run_equilibrium(&scenario, &network, &args.tolerances)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("eq.json"));
    EquilibriumFile::new(&network, &eq, converged).save(&out)?;
    println!(
        "wrote {} (residual {:.2e} after {} outer iterations)",
        out.display(),
        eq.residual,
        eq.outer_iterations
    );
    if !converged {
        return Err(CliError::NonConvergence(format!(
            "equilibrium residual {:.2e} above tolerance; best iterate written to {}",
            eq.residual,
            out.display()
        )));
    }
    Ok(())
}

fn run_equilibrium(
    scenario: &Scenario,
    network: &Network,
    flags: &ToleranceFlags,
) -> Result<(EquilibriumSolution, bool), CliError> {
    let cost_functions = scenario
        .bpr_functions(network)
        .ok_or_else(|| CliError::Input("scenario has no `bpr` block; `equilibrium` needs flow-dependent costs".into()))?;
    let mut options = EquilibriumOptions::default();
    apply_equilibrium_flags(&mut options, Some(scenario), flags);
    let problem = EquilibriumProblem {
        network,
        types: scenario.traveler_types(network)?,
        perturbation: scenario.perturbation_spec(network)?,
        cost_functions,
        options,
    };
    let started = Instant::now();
    match solve_equilibrium(&problem) {
        Ok(eq) => {
            log::info!(
                "equilibrium: {} outer / {} inner iterations, residual {:.2e}, {:?}",
                eq.outer_iterations,
                eq.total_inner_iterations,
                eq.residual,
                started.elapsed()
            );
            Ok((eq, true))
        }
        Err(EquilibriumError::NotConverged {
            iterations,
            residual,
            best,
        }) => {
            log::warn!("equilibrium stopped after {iterations} outer iterations, residual {residual:.2e}");
            Ok((*best, false))
        }
        Err(other) => Err(CliError::input(other)),
    }
}

pub fn eq_jacobian(args: &EqJacobianArgs) -> Result<(), CliError> {
    let (scenario, network) = load_scenario(&args.scenario)?;
    let family = parse_param(&args.param)?;
    let (eq, converged) = run_equilibrium(&scenario, &network, &args.tolerances)?;
    if !converged {
        return Err(CliError::NonConvergence(
            "equilibrium did not converge; refusing to differentiate".into(),
        ));
    }
    let cost_functions = scenario.bpr_functions(&network).expect("bpr checked");
    let problem = EquilibriumProblem {
        network: &network,
        types: scenario.traveler_types(&network)?,
        perturbation: scenario.perturbation_spec(&network)?,
        cost_functions,
        options: EquilibriumOptions::default(),
    };
    let cost_jac = analysis::equilibrium_cost_jacobian(&problem, &eq, &ParameterSpec { family })
        .map_err(CliError::input)?;
    log::info!(
        "sensitivity system condition number {:.3e}{}",
        cost_jac.condition,
        if cost_jac.near_boundary {
            " (near activation boundary)"
        } else {
            ""
        }
    );
    let flow_jac = analysis::equilibrium_flow_jacobian(&eq, &cost_jac);
    std::fs::create_dir_all(&args.out_dir)?;
    let ids = network.link_ids();
    let param = &args.param;
    report::emit_table_file(
        &args.out_dir.join(format!("cost_jacobian_{param}.csv")),
        &format!("dc/d{param}"),
        &ids,
        &ids,
        &flow_jac.cost,
    )?;
    report::emit_table_file(
        &args.out_dir.join(format!("flow_jacobian_{param}.csv")),
        &format!("dx/d{param}"),
        &ids,
        &ids,
        &flow_jac.aggregate,
    )?;
    for (i, per_type) in flow_jac.per_type.iter().enumerate() {
        let d = &scenario.demands[i];
        report::emit_table_file(
            &args
                .out_dir
                .join(format!("flow_jacobian_{param}_{}-{}.csv", d.origin, d.destination)),
            &format!("dx/d{param}"),
            &ids,
            &ids,
            per_type,
        )?;
    }
    println!("wrote Jacobians to {}", args.out_dir.display());
    Ok(())
}

pub fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let (scenario, network) = load_scenario(&args.scenario)?;
    let shift = parse_shift(&args.shift)?;
    let link_index = network.link_index(&shift.link)?;
    let base_params = param_values(&network, shift.family);
    let amount = match shift.amount {
        ShiftAmount::Relative(fraction) => base_params[link_index] * fraction,
        ShiftAmount::Absolute(value) => value,
    };

    let (eq, converged) = run_equilibrium(&scenario, &network, &args.tolerances)?;
    if !converged {
        return Err(CliError::NonConvergence("equilibrium did not converge".into()));
    }
    let cost_functions = scenario.bpr_functions(&network).expect("bpr checked");
    let problem = EquilibriumProblem {
        network: &network,
        types: scenario.traveler_types(&network)?,
        perturbation: scenario.perturbation_spec(&network)?,
        cost_functions: cost_functions.clone(),
        options: EquilibriumOptions::default(),
    };
    let cost_jac = analysis::equilibrium_cost_jacobian(
        &problem,
        &eq,
        &ParameterSpec {
            family: shift.family,
        },
    )
    .map_err(CliError::input)?;
    let flow_jac = analysis::equilibrium_flow_jacobian(&eq, &cost_jac);
    let mut epsilon = DVector::zeros(network.num_links());
    epsilon[link_index] = amount;
    let estimated =
        analysis::estimate_shifted_solution(&eq, &flow_jac, &epsilon).map_err(CliError::input)?;
    if !estimated.negative.is_empty() {
        log::warn!(
            "estimate drove {} link(s) negative; shift too large for linearization",
            estimated.negative.len()
        );
    }

    let exact = if args.exact {
        let mut shifted_fns = cost_functions;
        match shift.family {
            ParamFamily::T0 => shifted_fns[link_index].t0 += amount,
            ParamFamily::Kappa => shifted_fns[link_index].capacity += amount,
        }
        let mut options = EquilibriumOptions::default();
        apply_equilibrium_flags(&mut options, Some(&scenario), &args.tolerances);
        let shifted_problem = EquilibriumProblem {
            network: &network,
            types: scenario.traveler_types(&network)?,
            perturbation: scenario.perturbation_spec(&network)?,
            cost_functions: shifted_fns,
            options,
        };
        let eq_shifted = solve_equilibrium(&shifted_problem)
            .map_err(|e| CliError::NonConvergence(e.to_string()))?;
        Some(eq_shifted.aggregate_flows)
    } else {
        None
    };

    let ids = network.link_ids();
    let mut header = vec!["link", "unperturbed", "estimated"];
    if exact.is_some() {
        header.push("exact");
        header.push("difference");
    }
    report::emit_records_file(
        &args.out,
        &header,
        (0..ids.len()).map(|j| {
            let mut row = vec![
                ids[j].clone(),
                report::fmt_float(eq.aggregate_flows[j]),
                report::fmt_float(estimated.flows[j]),
            ];
            if let Some(exact) = &exact {
                row.push(report::fmt_float(exact[j]));
                row.push(report::fmt_float(exact[j] - estimated.flows[j]));
            }
            row
        }),
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn uncertainty(args: &UncertaintyArgs) -> Result<(), CliError> {
    let (scenario, network) = load_scenario(&args.scenario)?;
    let family = parse_param(&args.param)?;
    let (eq, converged) = run_equilibrium(&scenario, &network, &args.tolerances)?;
    if !converged {
        return Err(CliError::NonConvergence("equilibrium did not converge".into()));
    }
    let cost_functions = scenario.bpr_functions(&network).expect("bpr checked");
    let problem = EquilibriumProblem {
        network: &network,
        types: scenario.traveler_types(&network)?,
        perturbation: scenario.perturbation_spec(&network)?,
        cost_functions,
        options: EquilibriumOptions::default(),
    };
    let cost_jac = analysis::equilibrium_cost_jacobian(&problem, &eq, &ParameterSpec { family })
        .map_err(CliError::input)?;
    let flow_jac = analysis::equilibrium_flow_jacobian(&eq, &cost_jac);
    let input = UncertaintyInput::independent_cv(param_values(&network, family), args.cv, args.level);
    let result = analysis::propagate_uncertainty(&flow_jac, &eq.aggregate_flows, &input)
        .map_err(CliError::input)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let ids = network.link_ids();
    report::emit_records_file(
        &args.out_dir.join("uncertainty.csv"),
        &["link", "mean", "std_dev", "cv", "ci_low", "ci_high"],
        (0..ids.len()).map(|j| {
            vec![
                ids[j].clone(),
                report::fmt_float(result.mean[j]),
                report::fmt_float(result.std_dev[j]),
                report::fmt_float(result.cv[j]),
                report::fmt_float(result.intervals[j].0),
                report::fmt_float(result.intervals[j].1),
            ]
        }),
    )?;
    report::emit_table_file(
        &args.out_dir.join("correlation.csv"),
        "corr",
        &ids,
        &ids,
        &result.corr_flow_param,
    )?;
    println!("wrote uncertainty reports to {}", args.out_dir.display());
    Ok(())
}

pub fn substitution(args: &SubstitutionArgs) -> Result<(), CliError> {
    let (network, solution, spec) = solution_source(
        args.solution.as_ref(),
        args.scenario.as_ref(),
        args.network.as_ref(),
        &args.problem,
        &args.tolerances,
    )?;
    let jac = sensitivity::purc_jacobian_for(&network, &solution, &spec)?;
    let tol = args
        .tolerances
        .tol_class
        .unwrap_or(analysis::DEFAULT_CLASS_TOL);
    let pairs = analysis::substitution_report(&jac.matrix, tol);
    let ids = network.link_ids();
    report::emit_records_file(
        &args.out,
        &["flow_on", "change_on", "jacobian", "class"],
        pairs.iter().map(|p| {
            vec![
                ids[p.flow_on].clone(),
                ids[p.change_on].clone(),
                report::fmt_float(p.value),
                p.class.to_string(),
            ]
        }),
    )?;
    let complements = pairs
        .iter()
        .filter(|p| p.class == purc::analysis::PairClass::Complement)
        .count();
    println!(
        "wrote {} ({} ordered pairs, {} complements)",
        args.out.display(),
        pairs.len(),
        complements
    );
    Ok(())
}
