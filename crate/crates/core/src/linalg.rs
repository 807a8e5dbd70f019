//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{BunchingError, Result};

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(ch) => {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                Ok(x)
            } else {
                Err(singular(a, context))
            }
        }
        None => Err(singular(a, context)),
    }
}

pub fn inverse_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(singular(a, context)),
    }
}

pub fn singular(a: &DMatrix<f64>, context: &str) -> BunchingError {
    BunchingError::Singular {
        context: context.to_string(),
        condition: condition_number(a),
    }
}

/// Moore-Penrose inverse of a symmetric matrix and its numerical rank.
pub fn pseudo_inverse_sym(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let tol = max * n as f64 * f64::EPSILON * 16.0;
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > tol {
            rank += 1;
            let v = eig.eigenvectors.column(i);
            out += (v * v.transpose()) / lambda;
        }
    }
    (out, rank)
}

/// Numerical rank of a general matrix via singular values.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * a.nrows().max(a.ncols()) as f64 * f64::EPSILON * 16.0;
    sv.iter().filter(|s| **s > tol).count()
}

/// Symmetric inverse square root `a^{-1/2}` of a positive definite matrix.
pub fn inverse_sqrt_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return Err(singular(a, context));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}
