//! Solver for the individual perturbed-utility route choice program
//!
//! ```text
//!     min  c'x + F(x)   subject to  Ax = q b,  x >= 0.
//! ```
//!
//! The program is solved in the dual: the stationarity conditions give
//! `x_ij(eta) = (F'_ij)^{-1}(eta_i - eta_j - c_ij)` for node potentials
//! `eta`, which reduces the problem to the concave maximization of the dual
//! objective, solved here by a semismooth Newton method on the flow
//! conservation residual `A x(eta) = q b`.
//!
//! The map `eta -> x(eta)` has a derivative kink where
//! `eta_i - eta_j - c_ij = 0`; the Newton weights use the right-derivative
//! `1/F''(0)` on the active side of the kink and `0` on the inactive side.
//! Steps are globalized with a backtracking Armijo line search on the dual
//! objective. Links whose reduced cost stays negative carry an exact zero
//! flow, which is what makes the downstream active-set analysis reliable.

use nalgebra::DVector;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

use crate::linalg::{self, WeightedLaplacian};
use crate::network::{DemandVector, Network, NetworkError};
use crate::perturbation::{self, PerturbationSpec};
use crate::sensitivity;

#[derive(Error, Debug)]
pub enum SolveError {
    #[error("no directed path from origin `{origin}` to destination `{destination}`")]
    DestinationUnreachable { origin: String, destination: String },
    #[error("cost vector has {got} entries, network has {expected} links")]
    CostLength { got: usize, expected: usize },
    #[error("cost for link {index} is non-positive ({value})")]
    NonPositiveCost { index: usize, value: f64 },
    #[error("demand scale must be positive, got {0}")]
    NonPositiveDemandScale(f64),
    #[error("{0}")]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Perturbation(#[from] perturbation::PerturbationError),
    #[error(
        "solver stopped ({reason}) after {iterations} iterations with residual {residual:e}"
    )]
    NotConverged {
        reason: &'static str,
        iterations: usize,
        residual: f64,
        best: Box<PurcSolution>,
    },
}

/// Tolerances and limits for one PURC solve.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Stop when `|A x - q b|_inf <= feasibility_tol * max(1, q)`.
    pub feasibility_tol: f64,
    /// Bound accepted on the projected first-order condition at the solution.
    pub stationarity_tol: f64,
    pub max_iterations: usize,
    /// Relative activation threshold: a link is active when
    /// `x > active_threshold * max(1, |x|_inf)`.
    pub active_threshold: f64,
    pub max_backtracks: usize,
    /// Node count above which Newton systems switch from dense Cholesky to
    /// preconditioned conjugate gradients.
    pub dense_linear_limit: usize,
    pub cg_rel_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feasibility_tol: 1e-10,
            stationarity_tol: 1e-8,
            max_iterations: 400,
            active_threshold: 1e-9,
            max_backtracks: 60,
            dense_linear_limit: 600,
            cg_rel_tol: 1e-14,
        }
    }
}

/// One traveler type's route choice program.
#[derive(Debug, Clone)]
pub struct PurcProblem<'a> {
    pub network: &'a Network,
    /// Positive link costs, in link order.
    pub costs: DVector<f64>,
    pub demand: DemandVector,
    /// Demand weight `q`; the conservation constraint is `Ax = q b`.
    pub demand_scale: f64,
    pub perturbation: PerturbationSpec,
    pub options: SolverOptions,
    /// Warm-start node potentials (e.g. the previous outer iterate of an
    /// equilibrium loop); defaults to shortest-path distances.
    pub initial_duals: Option<DVector<f64>>,
}

impl<'a> PurcProblem<'a> {
    pub fn new(
        network: &'a Network,
        costs: DVector<f64>,
        demand: DemandVector,
        perturbation: PerturbationSpec,
    ) -> Self {
        PurcProblem {
            network,
            costs,
            demand,
            demand_scale: 1.0,
            perturbation,
            options: SolverOptions::default(),
            initial_duals: None,
        }
    }

    pub fn with_demand_scale(mut self, q: f64) -> Self {
        self.demand_scale = q;
        self
    }

    fn validate(&self) -> Result<(), SolveError> {
        let m = self.network.num_links();
        if self.costs.len() != m {
            return Err(SolveError::CostLength {
                got: self.costs.len(),
                expected: m,
            });
        }
        for (index, &value) in self.costs.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(SolveError::NonPositiveCost { index, value });
            }
        }
        if !(self.demand_scale > 0.0) {
            return Err(SolveError::NonPositiveDemandScale(self.demand_scale));
        }
        Ok(())
    }
}

/// Optimal flows, duals, and convergence diagnostics for one PURC solve.
#[derive(Debug, Clone)]
pub struct PurcSolution {
    /// Optimal link flows `x*` (exact zeros on links with negative reduced cost).
    pub flows: DVector<f64>,
    /// Node potentials, gauge-fixed to zero at the destination.
    pub duals: DVector<f64>,
    /// Per-link reduced cost `eta_i - eta_j - c_ij`.
    pub reduced_costs: DVector<f64>,
    /// Active mask at the solver's activation threshold.
    pub active: Vec<bool>,
    /// `c'x* + F(x*)`.
    pub objective: f64,
    pub feasibility_residual: f64,
    /// Infinity norm of the projected first-order condition.
    pub stationarity_residual: f64,
    pub iterations: usize,
    /// Copy of the problem data the downstream analyses need.
    pub costs: DVector<f64>,
    pub origin: usize,
    pub destination: usize,
    pub demand_scale: f64,
}

impl PurcSolution {
    pub fn num_links(&self) -> usize {
        self.flows.len()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Copy)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap on dist.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path cost to `destination` from every node, following link
/// directions, with `costs` as link lengths. Unreachable nodes get infinity.
fn cost_to_destination(network: &Network, costs: &DVector<f64>, destination: usize) -> Vec<f64> {
    let n = network.num_nodes();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..network.num_links() {
        let (_, head) = network.endpoints(j);
        incoming[head].push(j);
    }
    let mut dist = vec![f64::INFINITY; n];
    dist[destination] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        dist: 0.0,
        node: destination,
    });
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &j in &incoming[node] {
            let (tail, _) = network.endpoints(j);
            let candidate = d + costs[j];
            if candidate < dist[tail] {
                dist[tail] = candidate;
                heap.push(HeapEntry {
                    dist: candidate,
                    node: tail,
                });
            }
        }
    }
    dist
}

struct DualState {
    reduced_costs: DVector<f64>,
    flows: DVector<f64>,
    /// `A x - q b`.
    residual: DVector<f64>,
    /// Value of the dual objective (to be maximized).
    dual_value: f64,
}

fn evaluate_dual(
    network: &Network,
    costs: &DVector<f64>,
    spec: &PerturbationSpec,
    demand: &DemandVector,
    q: f64,
    eta: &DVector<f64>,
) -> DualState {
    let m = network.num_links();
    let mut reduced_costs = DVector::zeros(m);
    let mut flows = DVector::zeros(m);
    let mut dual_value = q * (eta[demand.origin] - eta[demand.destination]);
    let mut residual = DVector::zeros(network.num_nodes());
    residual[demand.origin] += q;
    residual[demand.destination] -= q;
    for j in 0..m {
        let (tail, head) = network.endpoints(j);
        let r = eta[tail] - eta[head] - costs[j];
        reduced_costs[j] = r;
        let x = spec.inv_deriv_at(j, r);
        flows[j] = x;
        dual_value += spec.dual_value_at(j, r);
        residual[tail] -= x;
        residual[head] += x;
    }
    DualState {
        reduced_costs,
        flows,
        residual,
        dual_value,
    }
}

/// Solves the Newton system `L delta = residual` with the destination
/// potential pinned to zero. Dense Cholesky on small node counts, Jacobi
/// conjugate gradients above `dense_linear_limit`; singular systems fall
/// back to a minimum-norm least-squares step.
fn newton_direction(
    network: &Network,
    weights: &[f64],
    residual: &DVector<f64>,
    pinned: usize,
    options: &SolverOptions,
) -> DVector<f64> {
    let n = network.num_nodes();
    let endpoints: Vec<(usize, usize)> = (0..network.num_links())
        .map(|j| network.endpoints(j))
        .collect();
    let lap = WeightedLaplacian {
        num_nodes: n,
        endpoints: &endpoints,
        weights,
    };

    if n <= options.dense_linear_limit {
        let dense = lap.to_dense();
        let keep: Vec<usize> = (0..n).filter(|&i| i != pinned).collect();
        let reduced = dense.select_rows(keep.iter()).select_columns(keep.iter());
        let rhs = DVector::from_iterator(n - 1, keep.iter().map(|&i| residual[i]));
        let sol = linalg::spd_solve(&reduced, &rhs, linalg::DEFAULT_RCOND);
        let mut full = DVector::zeros(n);
        for (k, &i) in keep.iter().enumerate() {
            full[i] = sol[k];
        }
        full
    } else {
        let mut rhs = residual.clone();
        rhs[pinned] = 0.0;
        let mut diag = lap.diagonal();
        // Pinning the gauge node makes its row an identity row.
        diag[pinned] = 1.0;
        let apply = |v: &DVector<f64>| {
            let mut pinned_v = v.clone();
            pinned_v[pinned] = 0.0;
            let mut out = lap.apply(&pinned_v);
            out[pinned] = v[pinned];
            out
        };
        let result =
            linalg::conjugate_gradient(apply, &diag, &rhs, options.cg_rel_tol, 40 * n.max(10));
        result.solution
    }
}

/// Solves the PURC program for one traveler.
///
/// Flows on links that are useless for this origin-destination pair come
/// back as exact zeros, and the duals are gauge-fixed to zero at the
/// destination node.
pub fn solve_purc(problem: &PurcProblem) -> Result<PurcSolution, SolveError> {
    problem.validate()?;
    let network = problem.network;
    let spec = &problem.perturbation;
    let q = problem.demand_scale;
    let demand = &problem.demand;
    let costs = &problem.costs;
    let options = &problem.options;
    let n = network.num_nodes();
    let m = network.num_links();

    let dist = cost_to_destination(network, costs, demand.destination);
    if !dist[demand.origin].is_finite() {
        return Err(SolveError::DestinationUnreachable {
            origin: network.node_id(demand.origin).to_string(),
            destination: network.node_id(demand.destination).to_string(),
        });
    }
    let max_finite = dist
        .iter()
        .filter(|d| d.is_finite())
        .fold(0.0f64, |a, &d| a.max(d));
    let mut eta = match &problem.initial_duals {
        Some(start) if start.len() == n && start.iter().all(|v| v.is_finite()) => {
            let mut eta = start.clone();
            // Keep the destination gauge.
            let shift = eta[demand.destination];
            eta.add_scalar_mut(-shift);
            eta
        }
        _ => DVector::from_iterator(
            n,
            dist.iter()
                .map(|&d| if d.is_finite() { d } else { max_finite }),
        ),
    };

    let feas_tol = options.feasibility_tol * q.max(1.0);
    let mut state = evaluate_dual(network, costs, spec, demand, q, &eta);
    let mut iterations = 0;

    let finish = |state: DualState, eta: DVector<f64>, iterations: usize| {
        build_solution(problem, state, eta, iterations)
    };

    loop {
        let feasibility = state.residual.amax();
        if feasibility <= feas_tol {
            return Ok(finish(state, eta, iterations));
        }
        if iterations >= options.max_iterations {
            let best = finish(state, eta, iterations);
            return Err(SolveError::NotConverged {
                reason: "iteration limit",
                iterations,
                residual: feasibility,
                best: Box::new(best),
            });
        }
        iterations += 1;

        // Newton weights: d/dr (F')^{-1}(r), right-derivative at the kink.
        let mut weights: Vec<f64> = (0..m)
            .map(|j| {
                if state.reduced_costs[j] >= 0.0 {
                    1.0 / spec.second_deriv_at(j, state.flows[j])
                } else {
                    0.0
                }
            })
            .collect();
        // A small relative floor keeps the Newton Laplacian positive
        // definite after gauge fixing. Without it, nodes touched only by
        // inactive links give zero rows with nonzero residual entries and
        // the conjugate-gradient solve diverges along the kernel.
        let w_max = weights.iter().fold(0.0f64, |a, &w| a.max(w));
        if w_max > 0.0 {
            let floor = 1e-8 * w_max;
            for w in weights.iter_mut() {
                if *w < floor {
                    *w = floor;
                }
            }
        }

        let mut direction = newton_direction(
            network,
            &weights,
            &state.residual,
            demand.destination,
            options,
        );
        let mut ascent = state.residual.dot(&direction);
        if !(ascent > 0.0) || !ascent.is_finite() {
            // Degenerate curvature along the residual; fall back to the
            // gradient of the dual objective.
            direction = state.residual.clone();
            direction[demand.destination] = 0.0;
            ascent = direction.norm_squared();
        }

        // Armijo backtracking on the dual objective. Near the solution the
        // objective improvement drops below floating-point resolution, so a
        // strict decrease of the conservation residual also accepts.
        let dual_scale = 1.0 + state.dual_value.abs();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_backtracks {
            let trial_eta = &eta + step * &direction;
            let trial = evaluate_dual(network, costs, spec, demand, q, &trial_eta);
            if trial.dual_value.is_finite() {
                let armijo = trial.dual_value >= state.dual_value + 1e-4 * step * ascent;
                let residual_drop = trial.dual_value >= state.dual_value - 1e-12 * dual_scale
                    && trial.residual.amax() <= 0.9 * state.residual.amax();
                if armijo || residual_drop {
                    accepted = Some((trial, trial_eta));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, trial_eta)) => {
                state = trial;
                eta = trial_eta;
            }
            None => {
                let feasibility = state.residual.amax();
                let best = finish(state, eta, iterations);
                return Err(SolveError::NotConverged {
                    reason: "line search stall",
                    iterations,
                    residual: feasibility,
                    best: Box::new(best),
                });
            }
        }
    }
}

fn build_solution(
    problem: &PurcProblem,
    state: DualState,
    eta: DVector<f64>,
    iterations: usize,
) -> PurcSolution {
    let options = &problem.options;
    let flow_scale = state.flows.amax().max(1.0);
    let active: Vec<bool> = state
        .flows
        .iter()
        .map(|&x| x > options.active_threshold * flow_scale)
        .collect();
    let objective = problem.costs.dot(&state.flows)
        + perturbation::eval_f(&problem.perturbation, &state.flows)
            .expect("dual flows are nonnegative");
    let mut solution = PurcSolution {
        feasibility_residual: state.residual.amax(),
        flows: state.flows,
        duals: eta,
        reduced_costs: state.reduced_costs,
        active,
        objective,
        stationarity_residual: 0.0,
        iterations,
        costs: problem.costs.clone(),
        origin: problem.demand.origin,
        destination: problem.demand.destination,
        demand_scale: problem.demand_scale,
    };
    solution.stationarity_residual =
        projected_foc_residual(problem.network, &solution, &problem.perturbation);
    solution
}

/// Optimal value of the program seen as a function of `-c`:
/// `W(-c) = -(c'x* + F(x*))`. Its gradient in `-c` is the optimal flow.
pub fn value_function(solution: &PurcSolution) -> f64 {
    -solution.objective
}

/// Infinity norm of the projected first-order condition
/// `P*(c + grad F(x*))`, with `P*` the projection onto circulations
/// supported on the active links.
pub fn projected_foc_residual(
    network: &Network,
    solution: &PurcSolution,
    spec: &PerturbationSpec,
) -> f64 {
    let gradient = perturbation::grad_f(spec, &solution.flows)
        .expect("solution flows are nonnegative");
    let stationarity = &solution.costs + gradient;
    let projected = sensitivity::project_onto_active_circulations(
        network,
        &solution.active,
        &stationarity,
        linalg::DEFAULT_RCOND,
    );
    projected.amax()
}
