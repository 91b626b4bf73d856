//! Perturbed-utility route choice and stochastic traffic equilibrium.
//!
//! The crate solves the convex program
//!
//! ```text
//!     min  c'x + F(x)   subject to  Ax = q b,  x >= 0
//! ```
//!
//! on a directed network (`A` node-link incidence, `b` unit
//! origin-destination demand, `F` a strictly convex link-separable
//! perturbation), and builds on that solver:
//!
//! * analytical Jacobians of optimal link flows with respect to link costs
//!   through active-set projections and Moore-Penrose pseudoinverses,
//! * a multi-type congested equilibrium (BPR link cost functions) with
//!   cost and flow Jacobians with respect to link cost parameters,
//! * first-order estimation of shifted solutions, delta-method
//!   uncertainty propagation, and substitution/complementarity reports,
//! * matrix-free Jacobian-vector products for large networks.

pub mod analysis;
pub mod equilibrium;
pub mod linalg;
pub mod network;
pub mod perturbation;
pub mod report;
pub mod scenario;
pub mod sensitivity;
pub mod solver;

pub use analysis::{
    confidence_intervals, equilibrium_cost_jacobian, equilibrium_flow_jacobian,
    estimate_shifted_solution, propagate_uncertainty, substitution_report, AnalysisError,
    ClassifiedPair, CostJacobian, EquilibriumJacobians, EstimatedFlows, PairClass, ParamFamily,
    ParameterSpec, UncertaintyInput, UncertaintyResult,
};
pub use equilibrium::{
    aggregate_flows, solve_equilibrium, BprError, BprFunction, EquilibriumError,
    EquilibriumOptions, EquilibriumProblem, EquilibriumSolution, TravelerType,
};
pub use network::{
    build_incidence, od_reachable, reduce_constraints, unit_demand, validate_connected,
    validate_weakly_connected, ConnectivityReport, DemandVector, IncidenceMatrix, Link, Network,
    NetworkError, ReducedConstraints,
};
pub use perturbation::{
    eval_f, grad_f, hess_diag_f, inv_grad, NamedScale, PerturbationError, PerturbationFamily,
    PerturbationSpec, ScaleRule,
};
pub use scenario::{Scenario, ScenarioError};
pub use sensitivity::{
    active_mask, boundary_check, directional_sensitivity, projection, purc_jacobian,
    purc_jacobian_for, ActiveSet, BoundaryReport, Projection, PurcJacobian, SensitivityError,
};
pub use solver::{
    projected_foc_residual, solve_purc, value_function, PurcProblem, PurcSolution, SolveError,
    SolverOptions,
};
