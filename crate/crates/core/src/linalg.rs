//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues at or below `PINV_CUTOFF * lambda_max` are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Moore–Penrose inverse of a symmetric matrix via its eigendecomposition,
/// together with the numerical rank.
pub fn sym_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    if lmax == 0.0 {
        return (out, 0);
    }
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l.abs() > PINV_CUTOFF * lmax {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    (out, rank)
}

/// Eigenvalues of the symmetrized matrix, with values in `[-cutoff, 0)`
/// rounded to zero. `cutoff = PINV_CUTOFF * lambda_max`.
pub fn psd_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l < 0.0 && l >= -PINV_CUTOFF * lmax { 0.0 } else { l })
        .collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Sum of the logs of the `rank` largest eigenvalues of a symmetric PSD
/// matrix (the log pseudo-determinant on its range).
pub fn log_pseudo_det(m: &DMatrix<f64>, rank: usize) -> f64 {
    let vals = psd_eigenvalues(m);
    if rank == 0 {
        return 0.0;
    }
    if vals.len() < rank || !(vals[rank - 1] > 0.0) {
        return f64::NEG_INFINITY;
    }
    vals[..rank].iter().map(|v| v.ln()).sum()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky()?;
    let inv = chol.inverse();
    Some(symmetrize(&inv))
}

/// Cholesky factor `L` with `m = L L'`, adding `1e-10 * trace` to the
/// diagonal once if the plain factorization fails.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    let s = symmetrize(m);
    if let Some(c) = s.clone().cholesky() {
        return Some((c.l(), false));
    }
    let jitter = 1e-10 * s.trace().abs().max(f64::MIN_POSITIVE);
    let mut j = s;
    for k in 0..j.nrows() {
        j[(k, k)] += jitter;
    }
    j.cholesky().map(|c| (c.l(), true))
}

/// Least-squares solution of `a x = b` with minimum norm, discarding
/// singular values below `rel_cutoff * sigma_max`.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> Option<(DVector<f64>, usize)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |x, &y| x.max(y));
    if !(smax > 0.0) || !smax.is_finite() {
        return None;
    }
    let u = svd.u.as_ref()?;
    let vt = svd.v_t.as_ref()?;
    let utb = u.transpose() * b;
    let mut coef = DVector::zeros(svd.singular_values.len());
    let mut rank = 0;
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > rel_cutoff * smax {
            coef[k] = utb[k] / s;
            rank += 1;
        }
    }
    Some((vt.transpose() * coef, rank))
}
