//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Singular value decomposition with singular values sorted non-increasing.
///
/// Returns `(u, sigma, v)` with `m = u * diag(sigma) * v^T`; `v` is `n x k`
/// where `k = min(m, n)`.
pub fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return (
            DMatrix::zeros(rows, 0),
            DVector::zeros(0),
            DMatrix::zeros(cols, 0),
        );
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut u_sorted = DMatrix::zeros(rows, k);
    let mut v_sorted = DMatrix::zeros(cols, k);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v.column(src));
        s_sorted[dst] = sigma[src].max(0.0);
    }
    (u_sorted, s_sorted, v_sorted)
}

/// Singular values, sorted non-increasing.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

/// Numerical rank: number of singular values above `max(m, n) * sigma_1 * 1e-10`.
pub fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    if s.is_empty() || s[0] == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * s[0] * 1e-10;
    s.iter().filter(|&&v| v > tol).count()
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `‖V^T V − I‖_∞` (largest absolute entry).
pub fn orthonormality_error(v: &DMatrix<f64>) -> f64 {
    let gram = v.tr_mul(v);
    let n = gram.nrows();
    max_abs(&(gram - DMatrix::<f64>::identity(n, n)))
}
