//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{PopqlError, Result};

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Sorted (ascending) eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(PopqlError::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(PopqlError::Numeric("non-finite entry in symmetric matrix".into()));
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| PopqlError::Numeric("symmetric eigen-solver did not converge".into()))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    symmetric_eigenvalues(m).map(|v| v[0])
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    symmetric_eigenvalues(m).map(|v| v[v.len() - 1])
}

/// `(m + mᵀ) / 2`
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves `a x = b` by LU, rejecting singular or non-finite results.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let x = a.clone().lu().solve(b).ok_or(PopqlError::Singular(what))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PopqlError::Singular(what));
    }
    Ok(x)
}

/// 2-norm condition number from the singular values; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Spectral norm of `m` by power iteration on `mᵀm`.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let gram = m.transpose() * m;
    let r = gram.nrows();
    if r == 0 {
        return 0.0;
    }
    let trace: f64 = gram.diagonal().iter().sum();
    if trace <= 0.0 {
        return 0.0;
    }
    // deterministic start with a component along every axis
    let mut v = DVector::from_fn(r, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let next = &gram * &v;
        let nn = next.norm();
        if nn == 0.0 {
            return 0.0;
        }
        let new_lambda = v.dot(&next);
        v = next / nn;
        if (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1e-300) {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    lambda.max(0.0).sqrt()
}

/// `Φᵀ diag(d) Ψ`
pub fn weighted_cross(phi: &DMatrix<f64>, d: &DVector<f64>, psi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = psi.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= d[i];
    }
    phi.transpose() * scaled
}

/// Euclidean norm of a vector, treating non-finite entries as infinite.
pub fn finite_norm(v: &DVector<f64>) -> f64 {
    if v.iter().all(|x| x.is_finite()) {
        v.norm()
    } else {
        f64::INFINITY
    }
}
