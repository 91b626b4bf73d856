//! Active-set projections and analytical flow Jacobians.
//!
//! For a solved program with active diagonal `B*` (ones on links carrying
//! positive flow), the flow response to marginal cost changes is governed by
//! the orthogonal projection `P*` onto the subspace
//! `{x : Ax = 0, B* x = x}` — circulations supported on active links — and
//! the Jacobian of optimal flows with respect to costs is
//!
//! ```text
//!     J = -(P* H P*)^+ ,    H = diag(F''(x*)),
//! ```
//!
//! a symmetric negative semidefinite matrix whose inactive rows and columns
//! vanish identically. `J` is only defined away from the activation
//! boundary (cost vectors where the active set flips); [`boundary_check`]
//! diagnoses proximity to that set and the Jacobian carries the flag.
//!
//! Dense matrices are formed on the active submatrix only. For large
//! networks, [`directional_sensitivity`] evaluates `q J delta` without
//! materializing `J`, by solving the equality-constrained quadratic program
//! behind the pseudoinverse with a Schur-complement conjugate-gradient
//! solve on the active subgraph's weighted Laplacian.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, WeightedLaplacian};
use crate::network::{IncidenceMatrix, Network};
use crate::perturbation::PerturbationSpec;
use crate::solver::PurcSolution;

/// Links flagged closer to activation/deactivation than this are treated
/// as "near the boundary" by default.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-7;

/// Dense Jacobians are refused above this many active links; use
/// [`directional_sensitivity`] instead.
pub const MAX_DENSE_ACTIVE_LINKS: usize = 5000;

#[derive(Error, Debug)]
pub enum SensitivityError {
    #[error("{active} active links exceed the dense limit of {limit}; use directional sensitivity")]
    TooManyActiveLinks { active: usize, limit: usize },
    #[error("active mask has {got} entries, expected {expected}")]
    MaskLength { got: usize, expected: usize },
    #[error("vector has {got} entries, expected {expected}")]
    VectorLength { got: usize, expected: usize },
    #[error("inner least-squares solve did not converge (residual {residual:e})")]
    InnerSolve { residual: f64 },
}

/// Boolean view of which links carry positive flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub mask: Vec<bool>,
}

impl ActiveSet {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        ActiveSet { mask }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Dense diagonal `B*`.
    pub fn to_diagonal(&self) -> DMatrix<f64> {
        let n = self.mask.len();
        let mut b = DMatrix::zeros(n, n);
        for (j, &m) in self.mask.iter().enumerate() {
            if m {
                b[(j, j)] = 1.0;
            }
        }
        b
    }

    fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| if m { Some(j) } else { None })
            .collect()
    }
}

/// Active links of a solution at threshold `eps_rel * max(1, |x|_inf)`.
pub fn active_mask(solution: &PurcSolution, eps_rel: f64) -> ActiveSet {
    let scale = solution.flows.amax().max(1.0);
    ActiveSet {
        mask: solution.flows.iter().map(|&x| x > eps_rel * scale).collect(),
    }
}

/// Dense orthogonal projection `P*` onto active-support circulations.
#[derive(Debug, Clone)]
pub struct Projection {
    pub matrix: DMatrix<f64>,
    pub active: ActiveSet,
}

/// Builds `P* = B* - (A B*)^+ A B*` from the incidence matrix and an
/// active mask.
///
/// Computed as `I - V_r V_r'` on the active column submatrix (the
/// null-space projector of `A` restricted to active links) and embedded
/// with exact zero rows and columns for inactive links.
pub fn projection(
    incidence: &IncidenceMatrix,
    active: &ActiveSet,
    rcond: f64,
) -> Result<Projection, SensitivityError> {
    let m = incidence.num_links();
    if active.mask.len() != m {
        return Err(SensitivityError::MaskLength {
            got: active.mask.len(),
            expected: m,
        });
    }
    let indices = active.indices();
    if indices.len() > MAX_DENSE_ACTIVE_LINKS {
        return Err(SensitivityError::TooManyActiveLinks {
            active: indices.len(),
            limit: MAX_DENSE_ACTIVE_LINKS,
        });
    }
    let mut matrix = DMatrix::zeros(m, m);
    if !indices.is_empty() {
        let a_act = incidence.to_dense_columns(&active.mask);
        let p_act = linalg::null_space_projector(&a_act, rcond);
        for (r, &jr) in indices.iter().enumerate() {
            for (c, &jc) in indices.iter().enumerate() {
                matrix[(jr, jc)] = p_act[(r, c)];
            }
        }
    }
    Ok(Projection {
        matrix,
        active: active.clone(),
    })
}

/// Proximity report for the activation boundary.
#[derive(Debug, Clone)]
pub struct BoundaryReport {
    /// Active links whose flow is within `tol` of zero.
    pub nearly_zero_active: Vec<usize>,
    /// Inactive links whose reduced cost is within `tol` of zero.
    pub nearly_active_inactive: Vec<usize>,
    pub tol: f64,
}

impl BoundaryReport {
    pub fn near_boundary(&self) -> bool {
        !self.nearly_zero_active.is_empty() || !self.nearly_active_inactive.is_empty()
    }
}

/// Flags links about to enter or leave the active set.
pub fn boundary_check(solution: &PurcSolution, tol: f64) -> BoundaryReport {
    let mut nearly_zero_active = Vec::new();
    let mut nearly_active_inactive = Vec::new();
    for j in 0..solution.num_links() {
        if solution.active[j] {
            if solution.flows[j] < tol {
                nearly_zero_active.push(j);
            }
        } else if solution.reduced_costs[j].abs() < tol {
            nearly_active_inactive.push(j);
        }
    }
    BoundaryReport {
        nearly_zero_active,
        nearly_active_inactive,
        tol,
    }
}

/// Jacobian of optimal flows with respect to link costs.
#[derive(Debug, Clone)]
pub struct PurcJacobian {
    /// `J[(a, b)] = d x*_a / d c_b`, in link order.
    pub matrix: DMatrix<f64>,
    pub active: ActiveSet,
    /// True when the solution sits close to the activation boundary and
    /// the Jacobian may not predict finite changes reliably.
    pub near_boundary: bool,
}

/// `J = -(P* H P*)^+` with `H = diag(F''(x*))`.
///
/// The pseudoinverse is taken on the active submatrix through a symmetric
/// eigendecomposition, so the result is symmetric negative semidefinite by
/// construction and inactive rows/columns are exact zeros.
pub fn purc_jacobian(
    solution: &PurcSolution,
    projection: &Projection,
    spec: &PerturbationSpec,
) -> Result<PurcJacobian, SensitivityError> {
    let m = solution.num_links();
    if projection.matrix.nrows() != m {
        return Err(SensitivityError::VectorLength {
            got: projection.matrix.nrows(),
            expected: m,
        });
    }
    let indices = projection.active.indices();
    let k = indices.len();
    let mut matrix = DMatrix::zeros(m, m);
    if k > 0 {
        let mut p_act = DMatrix::zeros(k, k);
        for (r, &jr) in indices.iter().enumerate() {
            for (c, &jc) in indices.iter().enumerate() {
                p_act[(r, c)] = projection.matrix[(jr, jc)];
            }
        }
        let h_act = DVector::from_iterator(
            k,
            indices
                .iter()
                .map(|&j| spec.second_deriv_at(j, solution.flows[j])),
        );
        // P diag(h) P, built by scaling columns of P before the product.
        let mut scaled = p_act.clone();
        for c in 0..k {
            for r in 0..k {
                scaled[(r, c)] *= h_act[c];
            }
        }
        let php = scaled * &p_act;
        let php_sym = 0.5 * (&php + php.transpose());
        let j_act = -linalg::sym_pinv(&php_sym, linalg::DEFAULT_RCOND);
        for (r, &jr) in indices.iter().enumerate() {
            for (c, &jc) in indices.iter().enumerate() {
                matrix[(jr, jc)] = j_act[(r, c)];
            }
        }
    }
    let report = boundary_check(solution, DEFAULT_BOUNDARY_TOL);
    Ok(PurcJacobian {
        matrix,
        active: projection.active.clone(),
        near_boundary: report.near_boundary(),
    })
}

/// Convenience: active set, projection, and Jacobian in one call.
pub fn purc_jacobian_for(
    network: &Network,
    solution: &PurcSolution,
    spec: &PerturbationSpec,
) -> Result<PurcJacobian, SensitivityError> {
    let incidence = crate::network::build_incidence(network);
    let active = ActiveSet::from_mask(solution.active.clone());
    let proj = projection(&incidence, &active, linalg::DEFAULT_RCOND)?;
    purc_jacobian(solution, &proj, spec)
}

/// Solves `(A_B diag(w) A_B') u = rhs` on the active subgraph, where the
/// system is a consistent singular weighted Laplacian. Conjugate gradients
/// first; dense eigen-pseudoinverse as a fallback on small systems.
fn active_laplacian_solve(
    network: &Network,
    link_weights: &[f64],
    rhs: &DVector<f64>,
    rel_tol: f64,
) -> Result<DVector<f64>, SensitivityError> {
    let n = network.num_nodes();
    let endpoints: Vec<(usize, usize)> = (0..network.num_links())
        .map(|j| network.endpoints(j))
        .collect();
    let lap = WeightedLaplacian {
        num_nodes: n,
        endpoints: &endpoints,
        weights: link_weights,
    };
    let diag = lap.diagonal();
    let result = linalg::conjugate_gradient(|v| lap.apply(v), &diag, rhs, rel_tol, 60 * n.max(10));
    if result.converged {
        return Ok(result.solution);
    }
    if n <= 2000 {
        let dense = lap.to_dense();
        return Ok(linalg::sym_pinv(&dense, linalg::DEFAULT_RCOND) * rhs);
    }
    Err(SensitivityError::InnerSolve {
        residual: result.residual_norm,
    })
}

/// Applies the projection `P*` to a vector without forming it:
/// `P* v = v_B - A_B' u` with `(A_B A_B') u = A_B v_B`.
pub fn project_onto_active_circulations(
    network: &Network,
    active: &[bool],
    v: &DVector<f64>,
    rel_tol: f64,
) -> DVector<f64> {
    let m = network.num_links();
    let mut masked = DVector::zeros(m);
    for j in 0..m {
        if active[j] {
            masked[j] = v[j];
        }
    }
    let weights: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let mut rhs = DVector::zeros(network.num_nodes());
    for j in 0..m {
        if active[j] {
            let (tail, head) = network.endpoints(j);
            rhs[tail] -= masked[j];
            rhs[head] += masked[j];
        }
    }
    let u = match active_laplacian_solve(network, &weights, &rhs, rel_tol) {
        Ok(u) => u,
        // The fallback only fails on huge disconnected systems; returning
        // the masked vector keeps the residual conservative (an upper bound).
        Err(_) => return masked,
    };
    let mut out = masked;
    for j in 0..m {
        if active[j] {
            let (tail, head) = network.endpoints(j);
            out[j] -= u[head] - u[tail];
        }
    }
    out
}

/// Directional sensitivity `q J delta` computed matrix-free.
///
/// Solves the equality-constrained quadratic program whose optimality
/// system is `H y + A_B' mu = delta_B`, `A_B y = 0` via the Schur
/// complement `(A_B H^{-1} A_B') mu = A_B H^{-1} delta_B`, then returns
/// `-q y`. The result equals `q J delta` with `J` from [`purc_jacobian`].
pub fn directional_sensitivity(
    network: &Network,
    solution: &PurcSolution,
    spec: &PerturbationSpec,
    delta: &DVector<f64>,
) -> Result<DVector<f64>, SensitivityError> {
    let m = network.num_links();
    if delta.len() != m {
        return Err(SensitivityError::VectorLength {
            got: delta.len(),
            expected: m,
        });
    }
    let active = &solution.active;
    let mut inv_h = vec![0.0; m];
    for j in 0..m {
        if active[j] {
            inv_h[j] = 1.0 / spec.second_deriv_at(j, solution.flows[j]);
        }
    }
    // rhs = A_B H^{-1} delta_B
    let mut rhs = DVector::zeros(network.num_nodes());
    for j in 0..m {
        if active[j] {
            let (tail, head) = network.endpoints(j);
            let flow = inv_h[j] * delta[j];
            rhs[tail] -= flow;
            rhs[head] += flow;
        }
    }
    let mu = active_laplacian_solve(network, &inv_h, &rhs, 1e-14)?;
    let q = solution.demand_scale;
    let mut out = DVector::zeros(m);
    for j in 0..m {
        if active[j] {
            let (tail, head) = network.endpoints(j);
            let a_t_mu = mu[head] - mu[tail];
            let y = inv_h[j] * (delta[j] - a_t_mu);
            out[j] = -q * y;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_incidence, unit_demand, Link, Network};
    use crate::perturbation::{PerturbationFamily, PerturbationSpec};
    use crate::solver::{solve_purc, PurcProblem};
    use approx::assert_abs_diff_eq;

    fn net(nodes: &[&str], links: &[(&str, &str, &str)]) -> Network {
        Network::new(
            nodes.iter().map(|s| s.to_string()).collect(),
            links
                .iter()
                .map(|(id, from, to)| Link {
                    id: id.to_string(),
                    from: from.to_string(),
                    to: to.to_string(),
                    length: 1.0,
                    t0: 1.0,
                    capacity: 1.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parallel_links_projection() {
        let network = net(&["1", "2"], &[("a", "1", "2"), ("b", "1", "2")]);
        let incidence = build_incidence(&network);
        let active = ActiveSet::from_mask(vec![true, true]);
        let p = projection(&incidence, &active, 1e-10).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_abs_diff_eq!((&p.matrix - &expected).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn series_path_projection_is_zero() {
        let network = net(&["1", "2", "3"], &[("a", "1", "2"), ("b", "2", "3")]);
        let incidence = build_incidence(&network);
        let active = ActiveSet::from_mask(vec![true, true]);
        let p = projection(&incidence, &active, 1e-10).unwrap();
        assert_abs_diff_eq!(p.matrix.amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn inactive_rows_are_exact_zeros() {
        let network = net(
            &["1", "2", "3"],
            &[("a", "1", "2"), ("b", "2", "3"), ("c", "1", "3"), ("d", "1", "3")],
        );
        let incidence = build_incidence(&network);
        let active = ActiveSet::from_mask(vec![false, false, true, true]);
        let p = projection(&incidence, &active, 1e-10).unwrap();
        for j in 0..4 {
            assert_eq!(p.matrix[(0, j)], 0.0);
            assert_eq!(p.matrix[(j, 0)], 0.0);
            assert_eq!(p.matrix[(1, j)], 0.0);
            assert_eq!(p.matrix[(j, 1)], 0.0);
        }
        // Two parallel active links: same 2x2 block as the parallel case.
        assert_abs_diff_eq!(p.matrix[(2, 2)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.matrix[(2, 3)], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn parallel_links_jacobian() {
        let network = net(&["1", "2"], &[("a", "1", "2"), ("b", "1", "2")]);
        let demand = unit_demand(&network, "1", "2").unwrap();
        let spec = PerturbationSpec::uniform(PerturbationFamily::Quadratic, 1.0, 2);
        let problem = PurcProblem::new(
            &network,
            DVector::from_column_slice(&[1.0, 1.0]),
            demand,
            spec.clone(),
        );
        let solution = solve_purc(&problem).unwrap();
        let jac = purc_jacobian_for(&network, &solution, &spec).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-0.25, 0.25, 0.25, -0.25]);
        assert_abs_diff_eq!((&jac.matrix - &expected).amax(), 0.0, epsilon = 1e-10);
        assert!(!jac.near_boundary);
    }

    #[test]
    fn matrix_free_projection_matches_dense() {
        let network = net(
            &["1", "2", "3", "4"],
            &[
                ("a", "1", "2"),
                ("b", "2", "3"),
                ("c", "1", "3"),
                ("d", "3", "4"),
                ("e", "2", "4"),
            ],
        );
        let incidence = build_incidence(&network);
        let active = ActiveSet::from_mask(vec![true, true, true, false, true]);
        let p = projection(&incidence, &active, 1e-10).unwrap();
        let v = DVector::from_column_slice(&[0.3, -1.2, 0.8, 2.0, -0.4]);
        let dense = &p.matrix * &v;
        let free = project_onto_active_circulations(&network, &active.mask, &v, 1e-14);
        assert_abs_diff_eq!((&dense - &free).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn jvp_matches_dense_jacobian_column() {
        let network = net(
            &["1", "2", "3"],
            &[("a", "1", "2"), ("b", "2", "3"), ("c", "1", "3"), ("d", "1", "3")],
        );
        let demand = unit_demand(&network, "1", "3").unwrap();
        let spec = PerturbationSpec::uniform(PerturbationFamily::Entropic, 1.0, 4);
        let problem = PurcProblem::new(
            &network,
            DVector::from_column_slice(&[1.0, 0.7, 2.4, 2.0]),
            demand,
            spec.clone(),
        )
        .with_demand_scale(2.5);
        let solution = solve_purc(&problem).unwrap();
        let jac = purc_jacobian_for(&network, &solution, &spec).unwrap();
        for j in 0..4 {
            let mut delta = DVector::zeros(4);
            delta[j] = 1.0;
            let jvp = directional_sensitivity(&network, &solution, &spec, &delta).unwrap();
            let dense = 2.5 * jac.matrix.column(j);
            assert_abs_diff_eq!((&jvp - &dense).amax(), 0.0, epsilon = 1e-9);
        }
        let zero = directional_sensitivity(&network, &solution, &spec, &DVector::zeros(4)).unwrap();
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn boundary_check_flags_constructed_cases() {
        let network = net(&["1", "2"], &[("a", "1", "2"), ("b", "1", "2")]);
        let demand = unit_demand(&network, "1", "2").unwrap();
        let spec = PerturbationSpec::uniform(PerturbationFamily::Quadratic, 1.0, 2);

        // Clean interior split.
        let problem = PurcProblem::new(
            &network,
            DVector::from_column_slice(&[1.0, 1.2]),
            demand.clone(),
            spec.clone(),
        );
        let solution = solve_purc(&problem).unwrap();
        assert!(!boundary_check(&solution, 1e-7).near_boundary());

        // Costs tuned so link b carries ~5e-13: 1 + 2 x_a = c_b + 2 x_b
        // with x_a + x_b = 1 gives x_b = (1 + 2 - c_b)/4.
        let eps = 2e-12;
        let problem = PurcProblem::new(
            &network,
            DVector::from_column_slice(&[1.0, 3.0 - 2.0 * eps]),
            demand.clone(),
            spec.clone(),
        );
        let solution = solve_purc(&problem).unwrap();
        let report = boundary_check(&solution, 1e-7);
        assert!(report.near_boundary(), "flows {:?}", solution.flows);

        // Just past deactivation: reduced cost barely negative.
        let problem = PurcProblem::new(
            &network,
            DVector::from_column_slice(&[1.0, 3.0 + 2.0 * eps]),
            demand,
            spec,
        );
        let solution = solve_purc(&problem).unwrap();
        let report = boundary_check(&solution, 1e-7);
        assert!(report.near_boundary());
    }
}
