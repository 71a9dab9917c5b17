//! Sandwich standard errors for the SGEE estimates.
//!
//! ```text
//! Omega0 = sum_i Lambda_i' W_i Lambda_i
//! Omega1 = sum_i Lambda_i' W_i e_i e_i' W_i Lambda_i
//! cov    = Omega0^+ Omega1 Omega0^+
//! ```
//!
//! `Omega0` is singular along the index direction (the centered `X` columns
//! are orthogonal to `theta`), hence the Moore–Penrose inverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_pinv;
use crate::sgee::LambdaBlock;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichEstimate {
    pub omega0: DMatrix<f64>,
    pub omega1: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub se: Vec<f64>,
    /// Numerical rank of `omega0`.
    pub rank: usize,
}

pub fn sandwich(lambda: &[LambdaBlock], weights: &[DMatrix<f64>], residuals: &[DVector<f64>]) -> Result<SandwichEstimate> {
    if lambda.len() != weights.len() || lambda.len() != residuals.len() || lambda.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "sandwich: {} lambda blocks, {} weights, {} residual vectors",
            lambda.len(),
            weights.len(),
            residuals.len()
        )));
    }
    let k = lambda[0].0.ncols();
    let mut omega0 = DMatrix::zeros(k, k);
    let mut omega1 = DMatrix::zeros(k, k);
    for (i, ((lam, w), e)) in lambda.iter().zip(weights).zip(residuals).enumerate() {
        let m = lam.0.nrows();
        if lam.0.ncols() != k || w.nrows() != m || w.ncols() != m || e.len() != m {
            return Err(Error::DimensionMismatch(format!("sandwich: block {i} has inconsistent dimensions")));
        }
        let wl = w * &lam.0;
        omega0 += lam.0.transpose() * &wl;
        let score = wl.transpose() * e;
        omega1 += &score * score.transpose();
    }
    omega0 = (&omega0 + omega0.transpose()) * 0.5;
    let (pinv, rank) = sym_pinv(&omega0);
    if rank + 1 < k {
        return Err(Error::DegenerateDesign(format!("rank of Omega0 is {rank}, expected at least {}", k - 1)));
    }
    if rank + 1 == k {
        log::debug!("Omega0 has the expected single null direction");
    }
    let cov = &pinv * &omega1 * &pinv;
    let cov = (&cov + cov.transpose()) * 0.5;
    let se = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok(SandwichEstimate { omega0, omega1, cov, se, rank })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_case() {
        let lam = vec![LambdaBlock(DMatrix::from_element(1, 1, 2.0))];
        let w = vec![DMatrix::from_element(1, 1, 1.0)];
        let e = vec![DVector::from_element(1, 3.0)];
        let s = sandwich(&lam, &w, &e).unwrap();
        assert!((s.omega0[(0, 0)] - 4.0).abs() < 1e-14);
        assert!((s.omega1[(0, 0)] - 36.0).abs() < 1e-14);
        assert!((s.cov[(0, 0)] - 2.25).abs() < 1e-14);
        assert!((s.se[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn zero_residuals_give_zero_covariance() {
        let lam = vec![LambdaBlock(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]))];
        let w = vec![DMatrix::identity(2, 2)];
        let e = vec![DVector::zeros(2)];
        let s = sandwich(&lam, &w, &e).unwrap();
        assert!(s.omega1.iter().all(|v| *v == 0.0));
        assert!(s.cov.iter().all(|v| *v == 0.0));
        assert_eq!(s.se, vec![0.0, 0.0]);
    }

    #[test]
    fn rank_two_short_is_degenerate() {
        let lam = vec![LambdaBlock(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]))];
        let w = vec![DMatrix::identity(1, 1)];
        let e = vec![DVector::from_element(1, 1.0)];
        assert!(matches!(sandwich(&lam, &w, &e), Err(Error::DegenerateDesign(_))));
    }
}
