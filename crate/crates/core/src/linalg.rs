//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Ridge added to a failed Cholesky factorisation, relative to `trace / p`.
pub const RIDGE_JITTER: f64 = 1e-10;

/// Relative eigenvalue cutoff used by [`pinv_sym`].
pub const PINV_RTOL: f64 = 1e-10;

/// Cholesky factorisation with a single ridge retry.
///
/// Returns the factor and the ridge that was added (zero when the plain
/// factorisation succeeded).
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Some((c, 0.0));
    }
    let p = m.nrows().max(1) as f64;
    let trace = m.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return None;
    }
    let ridge = RIDGE_JITTER * trace / p;
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += ridge;
    }
    shifted.cholesky().map(|c| (c, ridge))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (chol, _) = cholesky_jittered(m).ok_or_else(|| {
        Error::Singular(format!(
            "{}x{} matrix is not positive definite after ridge jitter",
            m.nrows(),
            m.ncols()
        ))
    })?;
    let inv = chol.inverse();
    Ok(symmetrize(&inv))
}

/// Solve `m x = b` for symmetric positive-definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    cholesky_jittered(m).map(|(c, _)| c.solve(b))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// Moore-Penrose pseudo-inverse of a symmetric positive semi-definite matrix.
///
/// Eigenvalues at or below `rtol * max_eigenvalue` are treated as zero, so an
/// all-zero input maps to an all-zero output.
pub fn pinv_sym(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut out = DMatrix::zeros(n, n);
    if lmax <= 0.0 || !lmax.is_finite() {
        return out;
    }
    let cutoff = rtol * lmax;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    out
}

/// Ratio of the largest to the smallest eigenvalue magnitude; infinite when
/// the smallest is zero.
pub fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let ev = sym_eigenvalues(m);
    let max = ev.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue relative to the trace magnitude; used by PSD checks.
pub fn min_eigen_over_trace(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let tr = m.trace().abs();
    if tr == 0.0 {
        if min >= 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        min / tr
    }
}

/// Rows of `x` selected by `idx`, in order.
pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

pub fn select(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}
