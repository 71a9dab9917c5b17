//! Semiparametric GEE (SGEE) estimation.
//!
//! The estimating function is
//!
//! ```text
//! G(beta, theta) = sum_i Lambda_i(theta)' W_i [Y_i - Z_i beta - eta_hat(X_i | beta, theta)]
//! ```
//!
//! where row `j` of `Lambda_i` is
//! `(Z_ij - rho_Z(u_ij), eta_dot(u_ij) * (X_ij - rho_X(u_ij)))` with
//! `u_ij = X_ij' theta` and every smooth quantity replaced by its local
//! linear estimate. The root is found by a trust-region dogleg in the
//! unnormalized `(beta, theta_1)`; `theta_hat = theta_1 / |theta_1|`.
//!
//! `G` is evaluated at the normalized direction, so the radial component of
//! `theta_1` is free (the Jacobian has that null direction, handled by the
//! minimum-norm Gauss–Newton step) and the smoother always works on a
//! unit-norm index.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, ModelParameters};
use crate::dogleg::{solve_dogleg, DoglegOptions};
use crate::error::{Error, Result};
use crate::inference::{sandwich, SandwichEstimate};
pub use crate::kernel::LinkEstimate;
use crate::kernel::{local_linear_fit, profile_link, uniform_grid, KernelSpec, WeightedSample, LINK_GRID_POINTS};

/// Per-subject `m_i × (d + p)` matrix of centered covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaBlock(pub DMatrix<f64>);

impl LambdaBlock {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Everything the estimating function needs at one `(beta, theta)`.
#[derive(Debug, Clone)]
pub struct SmoothedTerms {
    pub lambda: Vec<LambdaBlock>,
    /// `Y_i - Z_i beta - eta_hat(X_i | beta, theta)`.
    pub residuals: Vec<DVector<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub eta_dot: Vec<Vec<f64>>,
}

/// Smooths `Y - Z beta`, `Z` and `X` against the index in one pass and
/// assembles the `Lambda_i` blocks and profile residuals.
pub fn smoothed_terms(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    h: f64,
    spec: &KernelSpec,
) -> Result<SmoothedTerms> {
    let (d, p) = (ds.d, ds.p);
    let nc = 1 + d + p;
    let weights = ds.subject_weights();
    let total = ds.total_obs();
    let mut u = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(total * nc);
    let mut w = Vec::with_capacity(total);
    let mut index = Vec::with_capacity(ds.n());
    for (s, &wi) in ds.subjects.iter().zip(&weights) {
        let idx = s.index(&params.theta);
        let zb = s.linear_part(&params.beta);
        for j in 0..s.len() {
            rows.push(s.y[j] - zb[j]);
            rows.extend(s.z.row(j).iter());
            rows.extend(s.x.row(j).iter());
            w.push(wi);
        }
        u.extend_from_slice(&idx);
        index.push(idx);
    }
    let sample = WeightedSample::from_rows(u, rows, nc, w)?;

    let mut out = SmoothedTerms {
        lambda: Vec::with_capacity(ds.n()),
        residuals: Vec::with_capacity(ds.n()),
        eta: Vec::with_capacity(ds.n()),
        eta_dot: Vec::with_capacity(ds.n()),
    };
    for (s, idx) in ds.subjects.iter().zip(&index) {
        let m = s.len();
        let mut lam = DMatrix::zeros(m, d + p);
        let mut res = DVector::zeros(m);
        let mut eta = Vec::with_capacity(m);
        let mut eta_dot = Vec::with_capacity(m);
        let zb = s.linear_part(&params.beta);
        for j in 0..m {
            let fit = local_linear_fit(&sample, idx[j], h, spec)?;
            let slope = fit.b[0];
            for c in 0..d {
                lam[(j, c)] = s.z[(j, c)] - fit.a[1 + c];
            }
            for c in 0..p {
                lam[(j, d + c)] = slope * (s.x[(j, c)] - fit.a[1 + d + c]);
            }
            res[j] = s.y[j] - zb[j] - fit.a[0];
            eta.push(fit.a[0]);
            eta_dot.push(slope);
        }
        out.lambda.push(LambdaBlock(lam));
        out.residuals.push(res);
        out.eta.push(eta);
        out.eta_dot.push(eta_dot);
    }
    Ok(out)
}

/// `Lambda_i` blocks at `(beta, theta)`. `beta` enters through the link
/// derivative estimate.
pub fn build_lambda(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    h: f64,
    spec: &KernelSpec,
) -> Result<Vec<LambdaBlock>> {
    Ok(smoothed_terms(ds, params, h, spec)?.lambda)
}

fn check_weights(ds: &LongitudinalDataset, weights: &[DMatrix<f64>]) -> Result<()> {
    if weights.len() != ds.n() {
        return Err(Error::DimensionMismatch(format!("{} weight blocks for {} subjects", weights.len(), ds.n())));
    }
    for (s, w) in ds.subjects.iter().zip(weights) {
        if w.nrows() != s.len() || w.ncols() != s.len() {
            return Err(Error::DimensionMismatch(format!(
                "subject {}: weight block is {}×{}, expected {m}×{m}",
                s.id,
                w.nrows(),
                w.ncols(),
                m = s.len()
            )));
        }
    }
    Ok(())
}

fn assemble(terms: &SmoothedTerms, weights: &[DMatrix<f64>]) -> Vec<f64> {
    let k = terms.lambda.first().map_or(0, |l| l.0.ncols());
    let mut g = DVector::zeros(k);
    for ((lam, w), r) in terms.lambda.iter().zip(weights).zip(&terms.residuals) {
        g += lam.0.transpose() * (w * r);
    }
    g.iter().copied().collect()
}

/// Forward-difference steps of successive solver rounds, which share the
/// iteration budget equally. Each round
/// restarts from the best normalized iterate so far; the coarser Jacobians of
/// later rounds step over the kinks that the compact-support kernel puts in
/// `G` when an observation enters or leaves a sparse smoothing window.
const ROUND_FD_STEPS: &[f64] = &[1e-6, 1e-6, 1e-4, 1e-3];

/// Estimating function `G(beta, theta)`, length `d + p`.
pub fn gee_residual(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    weights: &[DMatrix<f64>],
    h: f64,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    check_weights(ds, weights)?;
    let terms = smoothed_terms(ds, params, h, spec)?;
    Ok(assemble(&terms, weights))
}

/// Identity weight blocks (the PULS special case).
pub fn identity_weights(ds: &LongitudinalDataset) -> Vec<DMatrix<f64>> {
    ds.subjects.iter().map(|s| DMatrix::identity(s.len(), s.len())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgeeOptions {
    pub dogleg: DoglegOptions,
    /// Points in the reported link grid; 0 skips the link report.
    pub link_grid_points: usize,
    /// Compute sandwich standard errors.
    pub std_errors: bool,
}

impl Default for SgeeOptions {
    fn default() -> Self {
        SgeeOptions {
            dogleg: DoglegOptions { trust_radius: 0.5, ..DoglegOptions::default() },
            link_grid_points: LINK_GRID_POINTS,
            std_errors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgeeFit {
    pub params: ModelParameters,
    /// Solver iterate for the unnormalized index direction.
    pub theta_raw: Vec<f64>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub link: LinkEstimate,
    pub std_errors: Vec<f64>,
}

pub fn fit_sgee(
    ds: &LongitudinalDataset,
    h: f64,
    spec: &KernelSpec,
    weights: &[DMatrix<f64>],
    init: &ModelParameters,
    opts: &SgeeOptions,
) -> Result<SgeeFit> {
    check_weights(ds, weights)?;
    if init.d() != ds.d || init.p() != ds.p {
        return Err(Error::DimensionMismatch("initial value does not match dataset dimensions".into()));
    }
    let mut params = ModelParameters::new(init.beta.clone(), init.theta.clone())?;
    let d = ds.d;
    let residual = |x: &[f64]| -> Result<Vec<f64>> {
        let p = ModelParameters::from_stacked(x, d)?;
        Ok(assemble(&smoothed_terms(ds, &p, h, spec)?, weights))
    };
    let mut theta_raw = params.theta.clone();
    let mut residual_norm = f64::INFINITY;
    let (mut iterations, mut evaluations) = (0, 0);
    for &fd_step in ROUND_FD_STEPS {
        let round_iters = (opts.dogleg.max_iters / ROUND_FD_STEPS.len()).max(1);
        let remaining = opts.dogleg.max_iters.saturating_sub(iterations);
        let dl = DoglegOptions { max_iters: round_iters.min(remaining), fd_step, ..opts.dogleg };
        let report = solve_dogleg(residual, &params.stacked(), &dl)?;
        iterations += report.iterations;
        evaluations += report.evaluations;
        if report.residual_norm < residual_norm {
            residual_norm = report.residual_norm;
            theta_raw = report.x[d..].to_vec();
            params = ModelParameters::from_stacked(&report.x, d)?;
        }
        if residual_norm <= opts.dogleg.tol || iterations >= opts.dogleg.max_iters {
            break;
        }
        log::debug!("SGEE round stalled at |G| = {residual_norm:.3e}; restarting with a coarser Jacobian");
    }
    let converged = residual_norm <= opts.dogleg.tol;
    if !converged {
        log::warn!("SGEE did not converge: |G| = {residual_norm:.3e} after {iterations} iterations");
    }

    let link = if opts.link_grid_points > 0 {
        let idx = ds.pooled_index(&params.theta);
        let lo = idx.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = idx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        estimate_link(ds, &params, h, spec, &uniform_grid(lo, hi, opts.link_grid_points))?
    } else {
        LinkEstimate { grid: Vec::new(), eta: Vec::new(), eta_dot: Vec::new() }
    };

    let std_errors = if opts.std_errors {
        sgee_sandwich(ds, &params, weights, h, spec)?.se
    } else {
        Vec::new()
    };

    Ok(SgeeFit {
        params,
        theta_raw,
        residual_norm,
        converged,
        iterations,
        evaluations,
        link,
        std_errors,
    })
}

/// Sandwich covariance at a fitted `(beta, theta)` with the SGEE weights.
pub fn sgee_sandwich(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    weights: &[DMatrix<f64>],
    h: f64,
    spec: &KernelSpec,
) -> Result<SandwichEstimate> {
    let terms = smoothed_terms(ds, params, h, spec)?;
    sandwich(&terms.lambda, weights, &terms.residuals)
}

/// Link estimate at the fitted parameters on `grid`.
pub fn estimate_link(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    h: f64,
    spec: &KernelSpec,
    grid: &[f64],
) -> Result<LinkEstimate> {
    profile_link(ds, params, h, spec, grid)
}
