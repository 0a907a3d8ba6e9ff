//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

pub fn norm_sq(v: &DVector<f64>) -> f64 {
    v.dot(v)
}

pub fn dist_sq(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Singular values of a dense matrix, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Spectral norm through a full SVD; used where an exact reference is wanted.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().sum()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// deterministic start. Returns the last Rayleigh quotient.
pub fn psd_top_eigenvalue(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // Slightly non-uniform start so that symmetric degeneracies do not hide
    // the top eigenvector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i as f64) * 0.618_033_988_7).fract());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let next = v.dot(&w);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        v = w / nw;
        if (next - est).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return next.max(est);
        }
        est = next;
    }
    est
}

/// Symmetric part `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
