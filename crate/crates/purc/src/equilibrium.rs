//! Congested link costs (BPR family) and the multi-type stochastic traffic
//! equilibrium.
//!
//! Equilibrium is characterized in cost space: a cost vector `c*` is an
//! equilibrium when `zeta^{-1}(c*) = x*(c*)` link by link, where `x*(c)` is
//! the aggregate of the per-type optimal route choice flows at cost `c`
//! (each type solves a unit-demand program; its weight `q^w` enters only
//! the aggregation). The solver iterates the damped fixed point
//! `c <- (1 - gamma) c + gamma zeta(x*(c))` with adaptive damping and
//! optional Anderson mixing, re-solving one route choice program per
//! traveler type (in parallel) at every outer iteration.
//!
//! Links with exactly zero aggregate flow are pinned to their free-flow
//! cost each iteration; `zeta^{-1}` has unbounded slope at the free-flow
//! point, so letting those coordinates relax geometrically would never
//! bring the flow-units residual below tolerance.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{DemandVector, Network};
use crate::perturbation::PerturbationSpec;
use crate::solver::{solve_purc, PurcProblem, PurcSolution, SolveError, SolverOptions};

#[derive(Error, Debug)]
pub enum BprError {
    #[error("flow must be nonnegative, got {0}")]
    NegativeFlow(f64),
    #[error("inverse cost derivatives are singular at the free-flow point c = t0 = {0}")]
    AtFreeFlow(f64),
}

#[derive(Error, Debug)]
pub enum EquilibriumError {
    #[error("traveler type {index}: {source}")]
    TypeSolve {
        index: usize,
        #[source]
        source: SolveError,
    },
    #[error("no traveler types given")]
    NoTypes,
    #[error("cost function list has {got} entries, network has {expected} links")]
    CostFunctionLength { got: usize, expected: usize },
    #[error(
        "equilibrium not converged after {iterations} outer iterations (residual {residual:e})"
    )]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Box<EquilibriumSolution>,
    },
}

/// BPR link performance function `zeta(x) = t0 (1 + alpha (x / kappa)^beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BprFunction {
    pub t0: f64,
    pub capacity: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Derivatives of the inverse cost function at a cost strictly above
/// free flow.
#[derive(Debug, Clone, Copy)]
pub struct BprInverseDerivs {
    /// d zeta^{-1} / d c
    pub wrt_cost: f64,
    /// d zeta^{-1} / d t0
    pub wrt_t0: f64,
    /// d zeta^{-1} / d kappa
    pub wrt_capacity: f64,
}

impl BprFunction {
    pub fn new(t0: f64, capacity: f64, alpha: f64, beta: f64) -> Self {
        BprFunction {
            t0,
            capacity,
            alpha,
            beta,
        }
    }

    /// Per-link functions from network attributes with shared `alpha`, `beta`.
    pub fn from_network(network: &Network, alpha: f64, beta: f64) -> Vec<BprFunction> {
        network
            .links()
            .iter()
            .map(|l| BprFunction::new(l.t0, l.capacity, alpha, beta))
            .collect()
    }

    pub fn eval(&self, x: f64) -> Result<f64, BprError> {
        if x < 0.0 {
            return Err(BprError::NegativeFlow(x));
        }
        Ok(self.t0 * (1.0 + self.alpha * (x / self.capacity).powf(self.beta)))
    }

    /// `d zeta / d x`, zero at x = 0 for beta > 1.
    pub fn deriv(&self, x: f64) -> Result<f64, BprError> {
        if x < 0.0 {
            return Err(BprError::NegativeFlow(x));
        }
        Ok(self.t0 * self.alpha * self.beta * (x / self.capacity).powf(self.beta - 1.0)
            / self.capacity)
    }

    /// Inverse cost `zeta^{-1}(c) = kappa ((c - t0) / (alpha t0))^{1/beta}`.
    ///
    /// Costs below free flow have no preimage; the inverse is extended by
    /// zero there and the second return value flags that case.
    pub fn inverse(&self, c: f64) -> (f64, bool) {
        if c <= self.t0 {
            (0.0, c < self.t0)
        } else {
            let u = (c - self.t0) / (self.alpha * self.t0);
            (self.capacity * u.powf(1.0 / self.beta), false)
        }
    }

    /// Closed-form derivatives of `zeta^{-1}` at cost `c > t0`.
    pub fn inverse_derivs(&self, c: f64) -> Result<BprInverseDerivs, BprError> {
        if c <= self.t0 {
            return Err(BprError::AtFreeFlow(self.t0));
        }
        let u = (c - self.t0) / (self.alpha * self.t0);
        let u_pow = u.powf(1.0 / self.beta - 1.0);
        let wrt_cost = self.capacity / self.beta * u_pow / (self.alpha * self.t0);
        let wrt_t0 = -self.capacity / self.beta * u_pow * c / (self.alpha * self.t0 * self.t0);
        let wrt_capacity = u.powf(1.0 / self.beta);
        Ok(BprInverseDerivs {
            wrt_cost,
            wrt_t0,
            wrt_capacity,
        })
    }
}

/// One traveler type: a unit origin-destination demand and its weight.
#[derive(Debug, Clone)]
pub struct TravelerType {
    pub demand: DemandVector,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct EquilibriumOptions {
    /// Convergence threshold on `|zeta^{-1}(c) - x*(c)|_inf` (flow units).
    pub tol: f64,
    pub max_outer_iterations: usize,
    /// Initial damping factor for the cost update.
    pub gamma0: f64,
    /// Anderson mixing depth; 0 disables acceleration.
    pub anderson_depth: usize,
    pub solver: SolverOptions,
    /// Solve the per-type programs in parallel within each outer iteration.
    pub parallel: bool,
    /// Optional starting costs (defaults to free-flow times).
    pub initial_costs: Option<DVector<f64>>,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            tol: 1e-8,
            max_outer_iterations: 600,
            gamma0: 0.5,
            anderson_depth: 5,
            solver: SolverOptions::default(),
            parallel: true,
            initial_costs: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumProblem<'a> {
    pub network: &'a Network,
    pub types: Vec<TravelerType>,
    pub perturbation: PerturbationSpec,
    pub cost_functions: Vec<BprFunction>,
    pub options: EquilibriumOptions,
}

/// Converged equilibrium costs and flows.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    /// Equilibrium link costs `c*`.
    pub costs: DVector<f64>,
    /// Unit-demand optimal flows per traveler type at `c*`.
    pub per_type: Vec<PurcSolution>,
    /// Type weights, aligned with `per_type`.
    pub weights: Vec<f64>,
    /// `sum_w q^w x^{w*}`.
    pub aggregate_flows: DVector<f64>,
    /// `|zeta^{-1}(c*) - x*(c*)|_inf`, skipping links whose cost-side
    /// residual sits at floating-point rounding level (where the flow-units
    /// gap is not representable: `zeta^{-1}` has unbounded slope at free
    /// flow).
    pub residual: f64,
    /// `|c* - zeta(x*(c*))|_inf`.
    pub cost_residual: f64,
    pub outer_iterations: usize,
    pub total_inner_iterations: usize,
}

/// Demand-weighted sum of per-type flows.
pub fn aggregate_flows(per_type_flows: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    assert_eq!(per_type_flows.len(), weights.len());
    let m = per_type_flows.first().map(|x| x.len()).unwrap_or(0);
    let mut out = DVector::zeros(m);
    for (x, &q) in per_type_flows.iter().zip(weights) {
        out.axpy(q, x, 1.0);
    }
    out
}

fn solve_types(
    problem: &EquilibriumProblem,
    costs: &DVector<f64>,
    warm_duals: &[Option<DVector<f64>>],
) -> Result<Vec<PurcSolution>, EquilibriumError> {
    let build = |(index, ty): (usize, &TravelerType)| {
        let mut p = PurcProblem::new(
            problem.network,
            costs.clone(),
            ty.demand.clone(),
            problem.perturbation.clone(),
        );
        p.options = problem.options.solver.clone();
        p.initial_duals = warm_duals[index].clone();
        solve_purc(&p).map_err(|source| EquilibriumError::TypeSolve { index, source })
    };
    if problem.options.parallel {
        problem
            .types
            .par_iter()
            .enumerate()
            .map(build)
            .collect::<Result<Vec<_>, _>>()
    } else {
        problem
            .types
            .iter()
            .enumerate()
            .map(build)
            .collect::<Result<Vec<_>, _>>()
    }
}

/// Flow-units fixed-point residual vector `zeta^{-1}(c) - x`.
fn residual_vector(
    cost_functions: &[BprFunction],
    costs: &DVector<f64>,
    aggregate: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        costs.len(),
        cost_functions
            .iter()
            .zip(costs.iter().zip(aggregate.iter()))
            .map(|(f, (&c, &x))| f.inverse(c).0 - x),
    )
}

/// Newton step on the cost-space residual `Phi(c) = zeta(x*(c)) - c`.
///
/// `grad Phi = diag(zeta') grad x* - I` is invertible everywhere (the
/// first term is a product of a positive diagonal with a negative
/// semidefinite matrix), so the step exists whenever the per-type flow
/// Jacobians do. Returns `c - (grad Phi)^{-1} Phi`.
fn newton_candidate(
    problem: &EquilibriumProblem,
    per_type: &[PurcSolution],
    aggregate: &DVector<f64>,
    costs: &DVector<f64>,
    cost_residual: &DVector<f64>,
) -> Option<DVector<f64>> {
    let m = costs.len();
    let mut flow_jac = nalgebra::DMatrix::zeros(m, m);
    for (solution, ty) in per_type.iter().zip(&problem.types) {
        let jac =
            crate::sensitivity::purc_jacobian_for(problem.network, solution, &problem.perturbation)
                .ok()?;
        flow_jac += ty.q * jac.matrix;
    }
    let mut map_jac = nalgebra::DMatrix::zeros(m, m);
    for r in 0..m {
        let zeta_prime = problem.cost_functions[r].deriv(aggregate[r]).ok()?;
        for c in 0..m {
            map_jac[(r, c)] = zeta_prime * flow_jac[(r, c)];
        }
        map_jac[(r, r)] -= 1.0;
    }
    let delta = map_jac.lu().solve(cost_residual)?;
    Some(costs - delta)
}

struct AndersonMixer {
    depth: usize,
    iterates: Vec<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
}

impl AndersonMixer {
    fn new(depth: usize) -> Self {
        AndersonMixer {
            depth,
            iterates: Vec::new(),
            residuals: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.iterates.clear();
        self.residuals.clear();
    }

    fn push(&mut self, c: DVector<f64>, f: DVector<f64>) {
        self.iterates.push(c);
        self.residuals.push(f);
        if self.iterates.len() > self.depth + 1 {
            self.iterates.remove(0);
            self.residuals.remove(0);
        }
    }

    /// Mixed candidate `c + f - (dC + dF) gamma` with `gamma` the least
    /// squares combination of residual differences.
    fn candidate(&self) -> Option<DVector<f64>> {
        let k = self.iterates.len();
        if self.depth == 0 || k < 2 {
            return None;
        }
        let n = self.iterates[0].len();
        let m = k - 1;
        let mut df = nalgebra::DMatrix::zeros(n, m);
        let mut dc = nalgebra::DMatrix::zeros(n, m);
        for i in 0..m {
            df.set_column(i, &(&self.residuals[i + 1] - &self.residuals[i]));
            dc.set_column(i, &(&self.iterates[i + 1] - &self.iterates[i]));
        }
        // Least squares via lightly regularized normal equations; the
        // mixing coefficients only steer the iteration, exactness is not
        // required.
        let f_last = &self.residuals[k - 1];
        let mut normal = df.transpose() * &df;
        let scale = (0..m).fold(0.0f64, |a, i| a.max(normal[(i, i)])).max(1e-300);
        for i in 0..m {
            normal[(i, i)] += 1e-12 * scale;
        }
        let rhs = df.transpose() * f_last;
        let gamma = normal.cholesky()?.solve(&rhs);
        let c_last = &self.iterates[k - 1];
        Some(c_last + f_last - (dc + df) * gamma)
    }
}

/// Solves the stochastic traffic equilibrium.
///
/// Any converged point is the equilibrium: with strictly increasing link
/// cost functions the solution is unique, so the iteration's path does not
/// matter. On hitting the outer iteration limit the best iterate comes
/// back inside [`EquilibriumError::NotConverged`].
pub fn solve_equilibrium(
    problem: &EquilibriumProblem,
) -> Result<EquilibriumSolution, EquilibriumError> {
    let m = problem.network.num_links();
    if problem.types.is_empty() {
        return Err(EquilibriumError::NoTypes);
    }
    if problem.cost_functions.len() != m {
        return Err(EquilibriumError::CostFunctionLength {
            got: problem.cost_functions.len(),
            expected: m,
        });
    }
    let options = &problem.options;
    let t0 = DVector::from_iterator(m, problem.cost_functions.iter().map(|f| f.t0));
    let mut costs = options.initial_costs.clone().unwrap_or_else(|| t0.clone());
    let mut gamma = options.gamma0;
    let mut mixer = AndersonMixer::new(options.anderson_depth);
    let mut warm: Vec<Option<DVector<f64>>> = vec![None; problem.types.len()];
    let mut total_inner = 0usize;
    let mut previous_residual = f64::INFINITY;
    let mut best: Option<EquilibriumSolution> = None;
    // Stiff congestion (the quartic cost law at low capacity) makes the
    // damped map contract arbitrarily slowly; once that is detected the
    // loop escalates to Newton steps on the cost-space residual.
    let mut newton_mode = false;
    let mut slow_iterations = 0usize;
    const NEWTON_SIZE_LIMIT: usize = 2000;
    // Per-link trust factors for the cost update. A link whose activation
    // status flips between iterations is straddling its kink, where the
    // one-sided Jacobian misleads every candidate; halving that link's
    // step until its status stabilizes restores contraction (flows are
    // continuous in costs, so a fine enough step always settles it).
    let mut link_caps = vec![0.5f64; m];
    let mut previous_active: Option<Vec<bool>> = None;

    for outer in 0..options.max_outer_iterations {
        let per_type = solve_types(problem, &costs, &warm)?;
        total_inner += per_type.iter().map(|s| s.iterations).sum::<usize>();
        for (w, s) in warm.iter_mut().zip(per_type.iter()) {
            *w = Some(s.duals.clone());
        }
        let flows: Vec<DVector<f64>> = per_type.iter().map(|s| s.flows.clone()).collect();
        let weights: Vec<f64> = problem.types.iter().map(|t| t.q).collect();
        let aggregate = aggregate_flows(&flows, &weights);

        let target = DVector::from_iterator(
            m,
            problem
                .cost_functions
                .iter()
                .zip(aggregate.iter())
                .map(|(f, &x)| f.eval(x).expect("aggregate flows are nonnegative")),
        );

        let flow_residuals = residual_vector(&problem.cost_functions, &costs, &aggregate);
        let mut residual = 0.0f64;
        let mut cost_residual = 0.0f64;
        for j in 0..m {
            let cr = (costs[j] - target[j]).abs();
            cost_residual = cost_residual.max(cr);
            if cr > 16.0 * f64::EPSILON * target[j].abs().max(1.0) {
                residual = residual.max(flow_residuals[j].abs());
            }
        }

        let solution = EquilibriumSolution {
            costs: costs.clone(),
            per_type,
            weights,
            aggregate_flows: aggregate.clone(),
            residual,
            cost_residual,
            outer_iterations: outer + 1,
            total_inner_iterations: total_inner,
        };
        if best.as_ref().map_or(true, |b| residual < b.residual) {
            best = Some(solution.clone());
        }
        if residual <= options.tol {
            return Ok(solution);
        }
        log::trace!(
            "equilibrium iter {outer}: residual {residual:.3e} cost_residual {cost_residual:.3e} gamma {gamma:.3} newton {newton_mode} costs {:?} flows {:?}",
            costs.as_slice(),
            aggregate.as_slice()
        );

        // Cost-space residual drives the Anderson mixing.
        let cost_residual = &target - &costs;
        mixer.push(costs.clone(), cost_residual.clone());
        if residual > previous_residual {
            gamma = (gamma * 0.5).max(5e-3);
            mixer.clear();
        } else {
            gamma = (gamma * 1.1).min(0.9);
        }
        if residual > 0.9 * previous_residual {
            slow_iterations += 1;
        } else {
            slow_iterations = 0;
        }
        if !newton_mode && slow_iterations >= 6 && m <= NEWTON_SIZE_LIMIT {
            newton_mode = true;
            log::debug!("equilibrium: slow contraction, switching to Newton steps");
        }
        previous_residual = residual;

        // Wandered far from the best iterate while mixing: restart there,
        // damped harder. (Newton's transients legitimately overshoot, so
        // the safeguard would cycle it.)
        let best_residual = best.as_ref().map(|b| b.residual).unwrap_or(f64::INFINITY);
        if !newton_mode && outer > 20 && residual > 10.0 * best_residual {
            costs = best.as_ref().expect("best exists").costs.clone();
            gamma = (gamma * 0.5).max(5e-3);
            mixer.clear();
            previous_residual = f64::INFINITY;
            continue;
        }

        // Anderson mixing assumes smooth fixed-point dynamics; a candidate
        // that dips below free flow on a flowing link would get clamped,
        // breaking that model and stalling the iteration near the kink.
        // Such candidates are discarded in favor of the damped step.
        let newton_next = if newton_mode {
            newton_candidate(
                problem,
                &solution.per_type,
                &aggregate,
                &costs,
                &cost_residual,
            )
            .filter(|c| c.iter().all(|v| v.is_finite()))
        } else {
            None
        };
        let mut next = match newton_next {
            Some(candidate) => candidate,
            None => match mixer.candidate() {
                Some(candidate)
                    if candidate.iter().all(|v| v.is_finite())
                        && (0..m).all(|j| aggregate[j] == 0.0 || candidate[j] >= t0[j]) =>
                {
                    candidate
                }
                _ => &costs + gamma * &cost_residual,
            },
        };
        let active_now: Vec<bool> = (0..m).map(|j| aggregate[j] > 0.0).collect();
        if let Some(prev) = &previous_active {
            for j in 0..m {
                if prev[j] != active_now[j] {
                    link_caps[j] = (link_caps[j] * 0.5).max(1e-5);
                } else {
                    link_caps[j] = (link_caps[j] * 1.3).min(0.5);
                }
            }
        }
        previous_active = Some(active_now);
        for j in 0..m {
            // Per-iteration trust cap: severely congested targets (BPR is
            // quartic, a low-capacity draw can demand a 1000x cost) are
            // approached geometrically instead of in one overshooting jump,
            // and flickering links move on a tightened leash.
            let cap = link_caps[j] * costs[j].max(t0[j]);
            let step = next[j] - costs[j];
            if step.abs() > cap {
                next[j] = costs[j] + cap.copysign(step);
            }
        }
        for j in 0..m {
            if next[j] < t0[j] {
                next[j] = t0[j];
            }
            if !newton_mode && aggregate[j] == 0.0 {
                // Zero-flow links rest at free flow, but the cost must get
                // there under damping: forcing a distant cost straight to
                // t0 un-damps the update and can cycle a marginal route
                // between activation and abandonment. Snap only the
                // endgame, where the geometric approach would otherwise
                // never push the flow-units residual below tolerance
                // (zeta^{-1} has unbounded slope at free flow). Newton
                // steps land on free flow exactly, so they skip this.
                let gap = costs[j] - t0[j];
                if gap <= 1e-3 * t0[j] {
                    next[j] = t0[j];
                } else {
                    next[j] = t0[j] + (1.0 - gamma) * gap;
                }
            }
        }
        costs = next;
    }

    let best = best.expect("at least one iterate evaluated");
    let residual = best.residual;
    let iterations = best.outer_iterations;
    Err(EquilibriumError::NotConverged {
        iterations,
        residual,
        best: Box::new(best),
    })
}
