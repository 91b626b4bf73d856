//! Equilibrium sensitivities, first-order solution estimation, uncertainty
//! propagation, and substitution/complementarity classification.
//!
//! Differentiating the equilibrium fixed point `zeta^{-1}(c*; theta) = x*(c*)`
//! with respect to a per-link parameter family `theta` (free-flow times or
//! capacities) gives the cost response
//!
//! ```text
//!     grad c*(theta) = -[grad_c zeta^{-1} - grad x*(c*)]^{-1} grad_theta zeta^{-1},
//! ```
//!
//! a linear system whose matrix is positive definite whenever the inverse
//! cost derivatives are finite — which fails exactly at free flow, where
//! `zeta^{-1}` has unbounded slope. Links with zero aggregate flow rest at
//! their free-flow cost identically (`c*_a = zeta_a(0)` for every theta), so
//! their rows are the known limits: `d c*_a / d t0_a = 1`,
//! `d c*_a / d kappa_a = 0`, zeros elsewhere. The solve runs on the
//! congested sub-block, which is exact because the flow Jacobian's rows and
//! columns vanish on inactive links.
//!
//! Flow responses follow by the chain rule per traveler type and aggregate
//! with the demand weights; those feed the Taylor estimate of shifted
//! solutions and the delta-method moments of flows under random parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::equilibrium::{BprError, EquilibriumProblem, EquilibriumSolution};
use crate::sensitivity::{self, PurcJacobian, SensitivityError};

#[derive(Error, Debug)]
pub enum AnalysisError {
    #[error("parameter covariance is not symmetric (max asymmetry {0:e})")]
    CovarianceNotSymmetric(f64),
    #[error("parameter covariance is not positive semidefinite (min eigenvalue {0:e})")]
    CovarianceNotPsd(f64),
    #[error("dimension mismatch: {context} has {got} entries, expected {expected}")]
    DimensionMismatch {
        context: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("equilibrium sensitivity system is singular")]
    SingularSystem,
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    InvalidLevel(f64),
    #[error("{0}")]
    Sensitivity(#[from] SensitivityError),
    #[error("{0}")]
    Bpr(#[from] BprError),
}

/// Which per-link scalar the sensitivity differentiates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamFamily {
    /// Free-flow travel times.
    T0,
    /// Link capacities.
    Kappa,
}

/// Parameter family plus the (implicit) link-order coordinate system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterSpec {
    pub family: ParamFamily,
}

/// `grad c*(theta)` with the pieces the flow Jacobians reuse.
#[derive(Debug, Clone)]
pub struct CostJacobian {
    pub family: ParamFamily,
    /// `matrix[(a, k)] = d c*_a / d theta_k`.
    pub matrix: DMatrix<f64>,
    /// Condition number (2-norm) of the congested-block system matrix.
    pub condition: f64,
    /// Inherited from the per-type route choice Jacobians.
    pub near_boundary: bool,
    /// Per-type `grad x^{w*}(c*)` at the equilibrium costs.
    pub per_type_flow_cost: Vec<PurcJacobian>,
    /// `sum_w q^w grad x^{w*}(c*)`.
    pub aggregate_flow_cost: DMatrix<f64>,
}

/// Flow responses to the parameter family, per type and aggregate.
#[derive(Debug, Clone)]
pub struct EquilibriumJacobians {
    pub family: ParamFamily,
    /// `grad c*(theta)`.
    pub cost: DMatrix<f64>,
    /// `grad x^{w*}(theta)` per traveler type (unit-demand flows).
    pub per_type: Vec<DMatrix<f64>>,
    /// `grad x*(theta) = sum_w q^w grad x^{w*}(theta)`.
    pub aggregate: DMatrix<f64>,
    pub near_boundary: bool,
    pub condition: f64,
}

/// Jacobian of equilibrium costs with respect to `theta`.
pub fn equilibrium_cost_jacobian(
    problem: &EquilibriumProblem,
    eq: &EquilibriumSolution,
    spec: &ParameterSpec,
) -> Result<CostJacobian, AnalysisError> {
    let m = problem.network.num_links();
    let mut per_type_flow_cost = Vec::with_capacity(eq.per_type.len());
    let mut near_boundary = false;
    for solution in &eq.per_type {
        let jac = sensitivity::purc_jacobian_for(problem.network, solution, &problem.perturbation)?;
        near_boundary |= jac.near_boundary;
        per_type_flow_cost.push(jac);
    }
    let mut aggregate_flow_cost = DMatrix::zeros(m, m);
    for (jac, &q) in per_type_flow_cost.iter().zip(&eq.weights) {
        aggregate_flow_cost += q * &jac.matrix;
    }

    // Congested links: positive aggregate flow, hence c* strictly above
    // free flow and finite inverse-cost derivatives.
    let congested: Vec<usize> = (0..m).filter(|&j| eq.aggregate_flows[j] > 0.0).collect();
    let mut matrix = DMatrix::zeros(m, m);
    for j in 0..m {
        if eq.aggregate_flows[j] == 0.0 {
            // c*_j == zeta_j(0) identically in theta.
            if spec.family == ParamFamily::T0 {
                matrix[(j, j)] = 1.0;
            }
        }
    }

    let mut condition = 1.0;
    let s = congested.len();
    if s > 0 {
        let mut system = DMatrix::zeros(s, s);
        let mut rhs = DMatrix::zeros(s, s);
        for (r, &jr) in congested.iter().enumerate() {
            let derivs = problem.cost_functions[jr].inverse_derivs(eq.costs[jr])?;
            system[(r, r)] = derivs.wrt_cost;
            let dtheta = match spec.family {
                ParamFamily::T0 => derivs.wrt_t0,
                ParamFamily::Kappa => derivs.wrt_capacity,
            };
            rhs[(r, r)] = -dtheta;
            for (c, &jc) in congested.iter().enumerate() {
                system[(r, c)] -= aggregate_flow_cost[(jr, jc)];
            }
        }
        // The system matrix is symmetric (diagonal plus a symmetric flow
        // Jacobian), so its eigenvalues give the 2-norm condition number.
        let eigenvalues = system.clone().symmetric_eigenvalues();
        let lmax = eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        let lmin = eigenvalues.iter().fold(f64::INFINITY, |a, &l| a.min(l.abs()));
        condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        let lu = system.lu();
        let solved = lu.solve(&rhs).ok_or(AnalysisError::SingularSystem)?;
        for (r, &jr) in congested.iter().enumerate() {
            for (c, &jc) in congested.iter().enumerate() {
                matrix[(jr, jc)] = solved[(r, c)];
            }
        }
    }

    Ok(CostJacobian {
        family: spec.family,
        matrix,
        condition,
        near_boundary,
        per_type_flow_cost,
        aggregate_flow_cost,
    })
}

/// Chain rule: per-type and aggregate flow responses to `theta`.
pub fn equilibrium_flow_jacobian(
    eq: &EquilibriumSolution,
    cost_jacobian: &CostJacobian,
) -> EquilibriumJacobians {
    let per_type: Vec<DMatrix<f64>> = cost_jacobian
        .per_type_flow_cost
        .iter()
        .map(|jac| &jac.matrix * &cost_jacobian.matrix)
        .collect();
    let m = cost_jacobian.matrix.nrows();
    let mut aggregate = DMatrix::zeros(m, m);
    for (jac, &q) in per_type.iter().zip(&eq.weights) {
        aggregate += q * jac;
    }
    EquilibriumJacobians {
        family: cost_jacobian.family,
        cost: cost_jacobian.matrix.clone(),
        per_type,
        aggregate,
        near_boundary: cost_jacobian.near_boundary,
        condition: cost_jacobian.condition,
    }
}

/// First-order estimate of aggregate flows after a parameter shift.
#[derive(Debug, Clone)]
pub struct EstimatedFlows {
    pub flows: DVector<f64>,
    /// Links whose estimate was a floating-point-dust negative, set to zero.
    pub clamped: Vec<usize>,
    /// Links whose estimate stayed meaningfully negative (shift too large
    /// for the linearization).
    pub negative: Vec<usize>,
}

/// `x*(theta) + grad x*(theta) . shift`, with tiny negative results
/// clamped to zero and flagged.
pub fn estimate_shifted_solution(
    eq: &EquilibriumSolution,
    jacobians: &EquilibriumJacobians,
    shift: &DVector<f64>,
) -> Result<EstimatedFlows, AnalysisError> {
    let m = eq.aggregate_flows.len();
    if shift.len() != m {
        return Err(AnalysisError::DimensionMismatch {
            context: "shift",
            got: shift.len(),
            expected: m,
        });
    }
    let mut flows = &eq.aggregate_flows + &jacobians.aggregate * shift;
    let scale = flows.amax().max(1.0);
    let mut clamped = Vec::new();
    let mut negative = Vec::new();
    for j in 0..m {
        if flows[j] < 0.0 {
            if flows[j] > -1e-12 * scale {
                flows[j] = 0.0;
                clamped.push(j);
            } else {
                negative.push(j);
            }
        }
    }
    Ok(EstimatedFlows {
        flows,
        clamped,
        negative,
    })
}

/// Random parameter vector: mean, covariance, and the confidence level for
/// reported intervals.
#[derive(Debug, Clone)]
pub struct UncertaintyInput {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub level: f64,
}

impl UncertaintyInput {
    /// Independent parameters with a shared coefficient of variation.
    pub fn independent_cv(mean: DVector<f64>, cv: f64, level: f64) -> Self {
        let n = mean.len();
        let mut covariance = DMatrix::zeros(n, n);
        for i in 0..n {
            let sd = cv * mean[i];
            covariance[(i, i)] = sd * sd;
        }
        UncertaintyInput {
            mean,
            covariance,
            level,
        }
    }

    fn validate(&self, expected: usize) -> Result<(), AnalysisError> {
        if self.mean.len() != expected {
            return Err(AnalysisError::DimensionMismatch {
                context: "parameter mean",
                got: self.mean.len(),
                expected,
            });
        }
        if self.covariance.nrows() != expected || self.covariance.ncols() != expected {
            return Err(AnalysisError::DimensionMismatch {
                context: "parameter covariance",
                got: self.covariance.nrows(),
                expected,
            });
        }
        let asym = (&self.covariance - self.covariance.transpose()).amax();
        if asym > 1e-12 {
            return Err(AnalysisError::CovarianceNotSymmetric(asym));
        }
        let min_eig = self.covariance.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 {
            return Err(AnalysisError::CovarianceNotPsd(min_eig));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(AnalysisError::InvalidLevel(self.level));
        }
        Ok(())
    }
}

/// Delta-method moments of equilibrium flows under random parameters.
///
/// Undefined entries (zero standard deviation on either side) are `NaN`;
/// report writers render them as "-" / `null`.
#[derive(Debug, Clone)]
pub struct UncertaintyResult {
    /// First-order mean: the flows at the parameter mean.
    pub mean: DVector<f64>,
    /// `grad x* K grad x*'`.
    pub variance: DMatrix<f64>,
    pub std_dev: DVector<f64>,
    /// Per-link coefficient of variation; `NaN` on zero-mean links.
    pub cv: DVector<f64>,
    /// `Cov[X*, Theta] = grad x* K`.
    pub cov_flow_param: DMatrix<f64>,
    /// `Corr[X*, Theta]`; `NaN` where a standard deviation vanishes.
    pub corr_flow_param: DMatrix<f64>,
    pub level: f64,
    /// Two-sided normal confidence intervals at `level`.
    pub intervals: Vec<(f64, f64)>,
}

/// Propagates parameter uncertainty through the aggregate flow Jacobian
/// evaluated at the parameter mean.
pub fn propagate_uncertainty(
    jacobians: &EquilibriumJacobians,
    mean_flows: &DVector<f64>,
    input: &UncertaintyInput,
) -> Result<UncertaintyResult, AnalysisError> {
    let m = jacobians.aggregate.nrows();
    input.validate(m)?;
    if mean_flows.len() != m {
        return Err(AnalysisError::DimensionMismatch {
            context: "mean flows",
            got: mean_flows.len(),
            expected: m,
        });
    }
    let j = &jacobians.aggregate;
    let jk = j * &input.covariance;
    let variance = &jk * j.transpose();
    let std_dev = DVector::from_iterator(m, (0..m).map(|i| variance[(i, i)].max(0.0).sqrt()));
    let cv = DVector::from_iterator(
        m,
        (0..m).map(|i| {
            if mean_flows[i] > 0.0 {
                std_dev[i] / mean_flows[i]
            } else {
                f64::NAN
            }
        }),
    );
    let param_sd: Vec<f64> = (0..m)
        .map(|i| input.covariance[(i, i)].max(0.0).sqrt())
        .collect();
    let mut corr = DMatrix::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            corr[(r, c)] = if std_dev[r] > 0.0 && param_sd[c] > 0.0 {
                jk[(r, c)] / (std_dev[r] * param_sd[c])
            } else {
                f64::NAN
            };
        }
    }
    let intervals = confidence_intervals(mean_flows, &std_dev, input.level)?;
    Ok(UncertaintyResult {
        mean: mean_flows.clone(),
        variance,
        std_dev,
        cv,
        cov_flow_param: jk,
        corr_flow_param: corr,
        level: input.level,
        intervals,
    })
}

/// Two-sided normal confidence intervals `mean +- z(level) std`.
pub fn confidence_intervals(
    mean: &DVector<f64>,
    std_dev: &DVector<f64>,
    level: f64,
) -> Result<Vec<(f64, f64)>, AnalysisError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(AnalysisError::InvalidLevel(level));
    }
    if mean.len() != std_dev.len() {
        return Err(AnalysisError::DimensionMismatch {
            context: "std dev",
            got: std_dev.len(),
            expected: mean.len(),
        });
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(0.5 + level / 2.0);
    Ok(mean
        .iter()
        .zip(std_dev.iter())
        .map(|(&m, &s)| (m - z * s, m + z * s))
        .collect())
}

/// Relationship of an ordered link pair under a flow Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairClass {
    /// Cost increase on `of` raises flow on `against`.
    Substitute,
    /// Cost increase on `of` lowers flow on `against`.
    Complement,
    Independent,
}

impl std::fmt::Display for PairClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairClass::Substitute => write!(f, "substitute"),
            PairClass::Complement => write!(f, "complement"),
            PairClass::Independent => write!(f, "independent"),
        }
    }
}

/// One classified ordered pair: the response of link `flow_on` to a cost
/// or parameter increase on link `change_on`.
#[derive(Debug, Clone)]
pub struct ClassifiedPair {
    pub flow_on: usize,
    pub change_on: usize,
    pub value: f64,
    pub class: PairClass,
}

/// Classifies every ordered off-diagonal pair of a flow Jacobian.
///
/// Complements (negative cross effects, the surprising case) come first,
/// strongest magnitude leading, then substitutes, then independents in
/// link order.
pub fn substitution_report(matrix: &DMatrix<f64>, tol_class: f64) -> Vec<ClassifiedPair> {
    let m = matrix.nrows();
    let mut pairs = Vec::with_capacity(m * m.saturating_sub(1));
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let value = matrix[(a, b)];
            let class = if value > tol_class {
                PairClass::Substitute
            } else if value < -tol_class {
                PairClass::Complement
            } else {
                PairClass::Independent
            };
            pairs.push(ClassifiedPair {
                flow_on: a,
                change_on: b,
                value,
                class,
            });
        }
    }
    pairs.sort_by(|p, q| {
        let rank = |c: PairClass| match c {
            PairClass::Complement => 0,
            PairClass::Substitute => 1,
            PairClass::Independent => 2,
        };
        rank(p.class)
            .cmp(&rank(q.class))
            .then_with(|| {
                if p.class == PairClass::Independent {
                    std::cmp::Ordering::Equal
                } else {
                    q.value.abs().total_cmp(&p.value.abs())
                }
            })
            .then_with(|| (p.flow_on, p.change_on).cmp(&(q.flow_on, q.change_on)))
    });
    pairs
}

/// Default classification threshold separating structural zeros from
/// round-off.
pub const DEFAULT_CLASS_TOL: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn interval_matches_published_row() {
        let mean = DVector::from_column_slice(&[27.127]);
        let std = DVector::from_column_slice(&[3.287]);
        let intervals = confidence_intervals(&mean, &std, 0.90).unwrap();
        assert_abs_diff_eq!(intervals[0].0, 21.721, epsilon = 0.01);
        assert_abs_diff_eq!(intervals[0].1, 32.534, epsilon = 0.01);

        let wider = confidence_intervals(&mean, &std, 0.95).unwrap();
        assert_abs_diff_eq!(wider[0].0, 20.68, epsilon = 0.01);
        assert_abs_diff_eq!(wider[0].1, 33.57, epsilon = 0.01);

        let degenerate =
            confidence_intervals(&mean, &DVector::from_column_slice(&[0.0]), 0.9).unwrap();
        assert_eq!(degenerate[0], (27.127, 27.127));

        assert!(matches!(
            confidence_intervals(&mean, &std, 1.2),
            Err(AnalysisError::InvalidLevel(_))
        ));
    }

    #[test]
    fn scalar_delta_method() {
        // One link, one parameter: Var = j^2 sigma^2.
        let jac = EquilibriumJacobians {
            family: ParamFamily::Kappa,
            cost: DMatrix::from_element(1, 1, 0.0),
            per_type: vec![],
            aggregate: DMatrix::from_element(1, 1, -2.0),
            near_boundary: false,
            condition: 1.0,
        };
        let input = UncertaintyInput {
            mean: DVector::from_column_slice(&[10.0]),
            covariance: DMatrix::from_element(1, 1, 9.0),
            level: 0.9,
        };
        let mean_flows = DVector::from_column_slice(&[4.0]);
        let result = propagate_uncertainty(&jac, &mean_flows, &input).unwrap();
        assert_relative_eq!(result.variance[(0, 0)], 36.0, epsilon = 1e-12);
        assert_relative_eq!(result.std_dev[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(result.cv[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(result.corr_flow_param[(0, 0)], -1.0, epsilon = 1e-12);

        // Zero covariance: everything degenerates cleanly.
        let zero = UncertaintyInput {
            mean: DVector::from_column_slice(&[10.0]),
            covariance: DMatrix::from_element(1, 1, 0.0),
            level: 0.9,
        };
        let result = propagate_uncertainty(&jac, &mean_flows, &zero).unwrap();
        assert_eq!(result.variance[(0, 0)], 0.0);
        assert_eq!(result.cv[0], 0.0);
        assert!(result.corr_flow_param[(0, 0)].is_nan());
    }

    #[test]
    fn covariance_validation() {
        let jac = EquilibriumJacobians {
            family: ParamFamily::Kappa,
            cost: DMatrix::zeros(2, 2),
            per_type: vec![],
            aggregate: DMatrix::zeros(2, 2),
            near_boundary: false,
            condition: 1.0,
        };
        let mean_flows = DVector::zeros(2);
        let bad_sym = UncertaintyInput {
            mean: DVector::zeros(2),
            covariance: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]),
            level: 0.9,
        };
        assert!(matches!(
            propagate_uncertainty(&jac, &mean_flows, &bad_sym),
            Err(AnalysisError::CovarianceNotSymmetric(_))
        ));
        let bad_psd = UncertaintyInput {
            mean: DVector::zeros(2),
            covariance: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            level: 0.9,
        };
        assert!(matches!(
            propagate_uncertainty(&jac, &mean_flows, &bad_psd),
            Err(AnalysisError::CovarianceNotPsd(_))
        ));
    }

    #[test]
    fn classification_thresholds() {
        let j = DMatrix::from_row_slice(
            3,
            3,
            &[-1.0, 0.25, -0.04, 0.25, -1.0, 1e-9, -0.04, 1e-9, -1.0],
        );
        let pairs = substitution_report(&j, 1e-6);
        assert_eq!(pairs.len(), 6);
        // Complements first, by magnitude.
        assert_eq!(pairs[0].class, PairClass::Complement);
        assert_eq!((pairs[0].flow_on, pairs[0].change_on), (0, 2));
        assert_eq!(pairs[1].class, PairClass::Complement);
        // Then substitutes, then the round-off pair as independent.
        assert_eq!(pairs[2].class, PairClass::Substitute);
        assert_eq!(pairs[5].class, PairClass::Independent);
        assert_eq!((pairs[5].flow_on, pairs[5].change_on), (2, 1));
    }
}
