//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative eigenvalue threshold used by [`sym_pinv`].
pub const PINV_REL_EPS: f64 = 1e-8;

/// Moore–Penrose inverse of a symmetric matrix.
///
/// The matrix is symmetrized first. Eigenvalues at or below
/// `rel_eps * trace / p` are treated as zero. Returns `None` when nothing
/// survives the threshold (zero or negative trace, non-finite entries).
pub fn sym_pinv(m: &Matrix, rel_eps: f64) -> Option<Matrix> {
    let p = m.nrows();
    if p == 0 || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if p == 1 {
        let v = m[(0, 0)];
        return (v > 0.0).then(|| Matrix::from_element(1, 1, 1.0 / v));
    }
    let sym = (m + m.transpose()) * 0.5;
    let trace = sym.trace();
    if trace <= 0.0 {
        return None;
    }
    let floor = rel_eps * trace / p as f64;
    let eig = SymmetricEigen::new(sym);
    let mut inv_vals = DVector::zeros(p);
    let mut kept = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > floor {
            inv_vals[k] = 1.0 / lam;
            kept += 1;
        }
    }
    if kept == 0 {
        return None;
    }
    let q = &eig.eigenvectors;
    Some(q * Matrix::from_diagonal(&inv_vals) * q.transpose())
}

/// Symmetric matrix with eigenvalues clipped from below at `floor`.
pub fn clip_eigenvalues(m: &Matrix, floor: f64) -> Matrix {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    q * Matrix::from_diagonal(&vals) * q.transpose()
}

/// Inverse of a general square matrix by LU, `None` when singular or non-finite.
pub fn inverse(m: &Matrix) -> Option<Matrix> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let inv = m.clone().lu().try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Solve `a x = b` by LU.
pub fn solve(a: &Matrix, b: &Vector) -> Option<Vector> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// 2-norm condition number from the singular values; infinite when singular.
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Least squares `min |x b - y|^2 + ridge |b|^2` (the intercept column, if
/// any, is penalized like the rest). Falls back to an SVD pseudo-inverse when
/// the normal equations are singular.
pub fn ridge_least_squares(x: &Matrix, y: &Vector, ridge: f64) -> Vector {
    let xt = x.transpose();
    let mut gram = &xt * x;
    for k in 0..gram.nrows() {
        gram[(k, k)] += ridge;
    }
    let rhs = &xt * y;
    if let Some(chol) = gram.clone().cholesky() {
        let sol = chol.solve(&rhs);
        if sol.iter().all(|v| v.is_finite()) {
            return sol;
        }
    }
    let svd = gram.svd(true, true);
    svd.solve(&rhs, 1e-12).unwrap_or_else(|_| Vector::zeros(x.ncols()))
}

pub fn max_abs(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_matrix(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}
