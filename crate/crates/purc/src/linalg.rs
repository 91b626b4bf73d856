//! Dense and matrix-free linear algebra helpers.
//!
//! Pseudoinverses use an SVD (or symmetric eigendecomposition) with a
//! relative singular-value cutoff: sigma is treated as zero when
//! `sigma <= rcond * sigma_max`.

use nalgebra::{DMatrix, DVector};

/// Default relative cutoff for pseudoinverse truncation.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// Number of singular values strictly above `threshold`.
pub fn effective_rank(singular_values: &DVector<f64>, threshold: f64) -> usize {
    singular_values.iter().filter(|&&s| s > threshold).count()
}

/// Eigenvalue cutoff for Gram matrices: `rcond^2` relative, floored at
/// the Gram-formation noise level (squaring a matrix loses half the
/// precision, so exact zeros surface as ~eps * lambda_max).
fn gram_cutoff(lambda_max: f64, rcond: f64) -> f64 {
    lambda_max * (rcond * rcond).max(256.0 * f64::EPSILON)
}

/// Moore-Penrose pseudoinverse with relative cutoff `rcond`.
///
/// Computed through a symmetric eigendecomposition of the Gram matrix of
/// the shorter side (`M^+ = (M'M)^+ M'` or its mirror). nalgebra's
/// iterative bidiagonal SVD mis-converges on some small integer matrices,
/// while the symmetric solver is dependable; our matrices have
/// well-separated spectra, so the squared conditioning is harmless.
pub fn pinv(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    if m.nrows() >= m.ncols() {
        let gram = m.transpose() * m;
        gram_pinv_apply(&gram, rcond) * m.transpose()
    } else {
        let gram = m * m.transpose();
        m.transpose() * gram_pinv_apply(&gram, rcond)
    }
}

/// `(G)^+` for a symmetric PSD Gram matrix, with the Gram-aware cutoff.
fn gram_pinv_apply(gram: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let eig = gram.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
    let cutoff = gram_cutoff(lambda_max, rcond);
    let n = gram.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let l = eig.eigenvalues[i];
        if l > cutoff {
            let qi = eig.eigenvectors.column(i);
            out.syger(1.0 / l, &qi, &qi, 1.0);
        }
    }
    for r in 0..n {
        for c in (r + 1)..n {
            out[(r, c)] = out[(c, r)];
        }
    }
    out
}

/// Pseudoinverse of a symmetric matrix via its eigendecomposition.
///
/// Returns a matrix that is symmetric by construction; eigenvalues with
/// `|lambda| <= rcond * |lambda|_max` are truncated.
pub fn sym_pinv(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let cutoff = rcond * lambda_max;
    let q = &eig.eigenvectors;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..eig.eigenvalues.len() {
        let l = eig.eigenvalues[i];
        if l.abs() > cutoff {
            let qi = q.column(i);
            out.syger(1.0 / l, &qi, &qi, 1.0);
        }
    }
    // syger fills the lower triangle; mirror it.
    for r in 0..out.nrows() {
        for c in (r + 1)..out.ncols() {
            out[(r, c)] = out[(c, r)];
        }
    }
    out
}

/// Orthogonal projector onto the null space of `m`.
///
/// Built from the symmetric eigendecomposition of the Gram matrix
/// `m' m`: the projector sums the eigenvector dyads of the (numerically)
/// zero eigenvalues.
pub fn null_space_projector(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let n = m.ncols();
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
    let cutoff = gram_cutoff(lambda_max, rcond);
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        if eig.eigenvalues[i] <= cutoff {
            let qi = eig.eigenvectors.column(i);
            p.syger(1.0, &qi, &qi, 1.0);
        }
    }
    for r in 0..n {
        for c in (r + 1)..n {
            p[(r, c)] = p[(c, r)];
        }
    }
    p
}

/// Weighted graph Laplacian `A diag(w) A'` in matrix-free form.
///
/// `endpoints[j] = (tail, head)` of link `j`; `w[j] >= 0`.
pub struct WeightedLaplacian<'a> {
    pub num_nodes: usize,
    pub endpoints: &'a [(usize, usize)],
    pub weights: &'a [f64],
}

impl WeightedLaplacian<'_> {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_nodes);
        for (j, &(tail, head)) in self.endpoints.iter().enumerate() {
            let w = self.weights[j];
            if w != 0.0 {
                let d = w * (v[tail] - v[head]);
                out[tail] += d;
                out[head] -= d;
            }
        }
        out
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut diag = DVector::zeros(self.num_nodes);
        for (j, &(tail, head)) in self.endpoints.iter().enumerate() {
            diag[tail] += self.weights[j];
            diag[head] += self.weights[j];
        }
        diag
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.num_nodes, self.num_nodes);
        for (j, &(tail, head)) in self.endpoints.iter().enumerate() {
            let w = self.weights[j];
            l[(tail, tail)] += w;
            l[(head, head)] += w;
            l[(tail, head)] -= w;
            l[(head, tail)] -= w;
        }
        l
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub solution: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive
/// semidefinite operator.
///
/// Starting from zero with a right-hand side in the operator's range, the
/// iterates stay in the range, so consistent singular systems (e.g. graph
/// Laplacians) are handled without explicit deflation.
pub fn conjugate_gradient<F>(
    apply: F,
    diag: &DVector<f64>,
    rhs: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> CgResult
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = rhs.len();
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return CgResult {
            solution: DVector::zeros(n),
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        };
    }
    let precond = diag.map(|d| if d > 0.0 { 1.0 / d } else { 1.0 });
    let tol = rel_tol * rhs_norm;

    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let mut z = r.component_mul(&precond);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut r_norm = r.norm();

    for iter in 0..max_iter {
        if r_norm <= tol {
            return CgResult {
                solution: x,
                iterations: iter,
                residual_norm: r_norm,
                converged: true,
            };
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 || !pap.is_finite() {
            // Null-space direction reached; the current iterate is the
            // least-squares answer in the range.
            return CgResult {
                solution: x,
                iterations: iter,
                residual_norm: r_norm,
                converged: r_norm <= tol * 1e3,
            };
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        r_norm = r.norm();
        z = r.component_mul(&precond);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    CgResult {
        converged: r_norm <= tol,
        solution: x,
        iterations: max_iter,
        residual_norm: r_norm,
    }
}

/// Symmetric positive (semi)definite solve that tries Cholesky first and
/// falls back to a pseudoinverse solve on singular systems.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, rcond: f64) -> DVector<f64> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.solve(rhs);
    }
    // Tiny diagonal lift keeps strictly-singular systems factorizable
    // without visibly moving the solution; if that still fails, use the
    // rank-truncated pseudoinverse (minimum-norm least squares).
    let diag_max = (0..m.nrows()).fold(0.0f64, |a, i| a.max(m[(i, i)].abs()));
    if diag_max > 0.0 {
        let mut lifted = m.clone();
        for i in 0..m.nrows() {
            lifted[(i, i)] += 1e-12 * diag_max;
        }
        if let Some(chol) = lifted.cholesky() {
            return chol.solve(rhs);
        }
    }
    sym_pinv(m, rcond) * rhs
}
