//! Link-separable strictly convex perturbation families.
//!
//! Each link carries a scale `s > 0` and one of two one-dimensional shapes:
//!
//! * entropic:  `F(x) = s ((1 + x) ln(1 + x) - x)`
//! * quadratic: `F(x) = s x^2`
//!
//! Both satisfy `F(0) = F'(0) = 0` and `F''(x) > 0` for `x >= 0`, and the
//! inverse derivative is extended by `(F')^{-1}(y) = 0` for `y < 0` so the
//! dual parametrization of flows is defined on all of the reals.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Network;

#[derive(Error, Debug)]
pub enum PerturbationError {
    #[error("flow component {index} is negative ({value})")]
    NegativeFlow { index: usize, value: f64 },
    #[error("scale for link {index} is non-positive ({value})")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("per-link scale list has {got} entries, network has {expected} links")]
    ScaleLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationFamily {
    Entropic,
    Quadratic,
}

/// How per-link scales are derived from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum ScaleRule {
    Named(NamedScale),
    Constant(f64),
    PerLink { per_link: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedScale {
    /// Link lengths.
    Length,
    /// Constant one.
    One,
    /// Free-flow travel times.
    T0,
}

impl ScaleRule {
    pub fn resolve(&self, network: &Network) -> Result<DVector<f64>, PerturbationError> {
        let n = network.num_links();
        let scales = match self {
            ScaleRule::Named(NamedScale::Length) => network.lengths(),
            ScaleRule::Named(NamedScale::One) => DVector::from_element(n, 1.0),
            ScaleRule::Named(NamedScale::T0) => network.free_flow_times(),
            ScaleRule::Constant(s) => DVector::from_element(n, *s),
            ScaleRule::PerLink { per_link } => {
                if per_link.len() != n {
                    return Err(PerturbationError::ScaleLength {
                        got: per_link.len(),
                        expected: n,
                    });
                }
                DVector::from_column_slice(per_link)
            }
        };
        for (index, &value) in scales.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PerturbationError::NonPositiveScale { index, value });
            }
        }
        Ok(scales)
    }
}

/// A concrete perturbation: one family and one positive scale per link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: PerturbationFamily,
    scales: Vec<f64>,
}

impl PerturbationSpec {
    pub fn new(family: PerturbationFamily, scales: Vec<f64>) -> Result<Self, PerturbationError> {
        for (index, &value) in scales.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PerturbationError::NonPositiveScale { index, value });
            }
        }
        Ok(PerturbationSpec { family, scales })
    }

    pub fn from_rule(
        family: PerturbationFamily,
        rule: &ScaleRule,
        network: &Network,
    ) -> Result<Self, PerturbationError> {
        Ok(PerturbationSpec {
            family,
            scales: rule.resolve(network)?.as_slice().to_vec(),
        })
    }

    pub fn uniform(family: PerturbationFamily, scale: f64, num_links: usize) -> Self {
        PerturbationSpec {
            family,
            scales: vec![scale; num_links],
        }
    }

    pub fn num_links(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn value_at(&self, j: usize, x: f64) -> f64 {
        let s = self.scales[j];
        match self.family {
            PerturbationFamily::Entropic => s * ((1.0 + x) * (1.0 + x).ln() - x),
            PerturbationFamily::Quadratic => s * x * x,
        }
    }

    pub fn deriv_at(&self, j: usize, x: f64) -> f64 {
        let s = self.scales[j];
        match self.family {
            PerturbationFamily::Entropic => s * (1.0 + x).ln(),
            PerturbationFamily::Quadratic => 2.0 * s * x,
        }
    }

    pub fn second_deriv_at(&self, j: usize, x: f64) -> f64 {
        let s = self.scales[j];
        match self.family {
            PerturbationFamily::Entropic => s / (1.0 + x),
            PerturbationFamily::Quadratic => 2.0 * s,
        }
    }

    /// `(F')^{-1}` on link `j`, extended by zero on negative arguments.
    pub fn inv_deriv_at(&self, j: usize, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let s = self.scales[j];
        match self.family {
            PerturbationFamily::Entropic => (y / s).exp_m1(),
            PerturbationFamily::Quadratic => y / (2.0 * s),
        }
    }

    /// Flow at which `F'` reaches `y`, together with the value
    /// `-y x + F(x)` of the link's dual inner minimization.
    ///
    /// Overflow in the entropic exponential is mapped to `-inf` so callers
    /// doing line searches reject the step instead of propagating NaNs.
    pub fn dual_value_at(&self, j: usize, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let s = self.scales[j];
        match self.family {
            PerturbationFamily::Entropic => {
                let t = y / s;
                if t > 700.0 {
                    f64::NEG_INFINITY
                } else {
                    y + s * (1.0 - t.exp())
                }
            }
            PerturbationFamily::Quadratic => -y * y / (4.0 * s),
        }
    }
}

fn check_nonnegative(x: &DVector<f64>) -> Result<(), PerturbationError> {
    for (index, &value) in x.iter().enumerate() {
        if value < 0.0 {
            return Err(PerturbationError::NegativeFlow { index, value });
        }
    }
    Ok(())
}

/// Total perturbation `F(x)` summed across links.
pub fn eval_f(spec: &PerturbationSpec, x: &DVector<f64>) -> Result<f64, PerturbationError> {
    check_nonnegative(x)?;
    Ok(x.iter()
        .enumerate()
        .map(|(j, &xj)| spec.value_at(j, xj))
        .sum())
}

/// Gradient of `F` (one entry per link).
pub fn grad_f(spec: &PerturbationSpec, x: &DVector<f64>) -> Result<DVector<f64>, PerturbationError> {
    check_nonnegative(x)?;
    Ok(DVector::from_iterator(
        x.len(),
        x.iter().enumerate().map(|(j, &xj)| spec.deriv_at(j, xj)),
    ))
}

/// Diagonal of the Hessian of `F`.
pub fn hess_diag_f(
    spec: &PerturbationSpec,
    x: &DVector<f64>,
) -> Result<DVector<f64>, PerturbationError> {
    check_nonnegative(x)?;
    Ok(DVector::from_iterator(
        x.len(),
        x.iter().enumerate().map(|(j, &xj)| spec.second_deriv_at(j, xj)),
    ))
}

/// Componentwise `(F')^{-1}(y)`, zero on negative components.
pub fn inv_grad(spec: &PerturbationSpec, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        y.len(),
        y.iter().enumerate().map(|(j, &yj)| spec.inv_deriv_at(j, yj)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(family: PerturbationFamily, scales: &[f64]) -> PerturbationSpec {
        PerturbationSpec::new(family, scales.to_vec()).unwrap()
    }

    #[test]
    fn eval_matches_closed_forms() {
        let quad = spec(PerturbationFamily::Quadratic, &[1.0]);
        assert_eq!(eval_f(&quad, &DVector::from_column_slice(&[0.0])).unwrap(), 0.0);
        assert_eq!(eval_f(&quad, &DVector::from_column_slice(&[2.0])).unwrap(), 4.0);

        let ent = spec(PerturbationFamily::Entropic, &[1.0]);
        assert_eq!(eval_f(&ent, &DVector::from_column_slice(&[0.0])).unwrap(), 0.0);
        assert_relative_eq!(
            eval_f(&ent, &DVector::from_column_slice(&[1.0])).unwrap(),
            2.0 * 2.0f64.ln() - 1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn derivatives_match_closed_forms() {
        let quad = spec(PerturbationFamily::Quadratic, &[1.0]);
        let x = DVector::from_column_slice(&[3.0]);
        assert_eq!(grad_f(&quad, &x).unwrap()[0], 6.0);
        assert_eq!(hess_diag_f(&quad, &x).unwrap()[0], 2.0);

        let ent = spec(PerturbationFamily::Entropic, &[2.0]);
        let x = DVector::from_column_slice(&[1.0]);
        assert_relative_eq!(grad_f(&ent, &x).unwrap()[0], 2.0 * 2.0f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(hess_diag_f(&ent, &x).unwrap()[0], 1.0, epsilon = 1e-15);

        for family in [PerturbationFamily::Entropic, PerturbationFamily::Quadratic] {
            let s = spec(family, &[1.7]);
            assert_eq!(grad_f(&s, &DVector::from_column_slice(&[0.0])).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn inverse_derivative_examples() {
        let ent = spec(PerturbationFamily::Entropic, &[1.0]);
        assert_eq!(ent.inv_deriv_at(0, -3.0), 0.0);
        assert_relative_eq!(ent.inv_deriv_at(0, 2.0f64.ln()), 1.0, epsilon = 1e-15);

        let quad = spec(PerturbationFamily::Quadratic, &[1.0]);
        assert_eq!(quad.inv_deriv_at(0, -3.0), 0.0);
        assert_eq!(quad.inv_deriv_at(0, 6.0), 3.0);
    }

    #[test]
    fn negative_flow_rejected() {
        let quad = spec(PerturbationFamily::Quadratic, &[1.0, 1.0]);
        let x = DVector::from_column_slice(&[0.5, -0.1]);
        assert!(matches!(
            eval_f(&quad, &x),
            Err(PerturbationError::NegativeFlow { index: 1, .. })
        ));
    }

    fn family_strategy() -> impl Strategy<Value = PerturbationFamily> {
        prop_oneof![
            Just(PerturbationFamily::Entropic),
            Just(PerturbationFamily::Quadratic)
        ]
    }

    proptest! {
        #[test]
        fn inv_grad_inverts_grad(
            family in family_strategy(),
            s in 0.1f64..5.0,
            x in 1e-6f64..50.0,
        ) {
            let spec = spec(family, &[s]);
            let y = spec.deriv_at(0, x);
            let back = spec.inv_deriv_at(0, y);
            prop_assert!((back - x).abs() <= 1e-12 * x.max(1.0));
        }

        #[test]
        fn grad_matches_finite_differences(
            family in family_strategy(),
            s in 0.1f64..5.0,
            x in 0.05f64..20.0,
        ) {
            let spec = spec(family, &[s]);
            let h = 1e-6 * x.max(1.0);
            let fd = (spec.value_at(0, x + h) - spec.value_at(0, x - h)) / (2.0 * h);
            let g = spec.deriv_at(0, x);
            prop_assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-6));
        }

        #[test]
        fn hess_matches_finite_differences(
            family in family_strategy(),
            s in 0.1f64..5.0,
            x in 0.05f64..20.0,
        ) {
            let spec = spec(family, &[s]);
            let h = 1e-6 * x.max(1.0);
            let fd = (spec.deriv_at(0, x + h) - spec.deriv_at(0, x - h)) / (2.0 * h);
            let hess = spec.second_deriv_at(0, x);
            prop_assert!((fd - hess).abs() <= 1e-6 * hess.abs().max(1e-6));
        }

        #[test]
        fn strictly_convex(
            family in family_strategy(),
            s in 0.1f64..5.0,
            x1 in 0.0f64..10.0,
            x2 in 0.0f64..10.0,
            t in 0.05f64..0.95,
        ) {
            prop_assume!((x1 - x2).abs() > 1e-3);
            let spec = spec(family, &[s]);
            let mid = spec.value_at(0, t * x1 + (1.0 - t) * x2);
            let chord = t * spec.value_at(0, x1) + (1.0 - t) * spec.value_at(0, x2);
            prop_assert!(mid < chord);
        }
    }
}
