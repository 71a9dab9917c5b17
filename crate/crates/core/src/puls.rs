//! Profile unweighted least squares (PULS).
//!
//! For fixed `(beta, theta)` the link is profiled out by the local linear
//! smoother, leaving the criterion
//!
//! ```text
//! Q(beta, theta) = sum_i | Y_i - Z_i beta - eta_hat(X_i | beta, theta) |^2
//! ```
//!
//! which is minimized by Nelder–Mead over the stacked `(beta, theta)` vector.
//! `theta` is normalized inside the criterion, so the search is effectively
//! on the unit sphere and convergence is judged on normalized parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_theta, LongitudinalDataset, ModelParameters};
use crate::error::{Error, Result};
use crate::kernel::{local_linear_fit, profile_sample, KernelSpec};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Per-subject penalty applied when the smoother cannot be evaluated.
pub const PENALTY_PER_SUBJECT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulsOptions {
    pub max_iters: usize,
    pub xtol: f64,
    pub ftol: f64,
    /// Initial simplex edge along every coordinate.
    pub initial_step: f64,
    /// Restart once from the best vertex with a simplex 10× smaller.
    pub restart: bool,
}

impl Default for PulsOptions {
    fn default() -> Self {
        PulsOptions { max_iters: 4000, xtol: 1e-8, ftol: 1e-10, initial_step: 0.1, restart: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulsFit {
    pub params: ModelParameters,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Value of the PULS criterion. `penalized` marks a fallback value used
/// because some observation had no data in its smoothing window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub penalized: bool,
}

/// Residuals `Y_i - Z_i beta - eta_hat(X_i | beta, theta)`, one vector per subject.
pub fn profile_residuals(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    h: f64,
    spec: &KernelSpec,
) -> Result<Vec<Vec<f64>>> {
    let sample = profile_sample(ds, params)?;
    ds.subjects
        .iter()
        .map(|s| {
            let zb = s.linear_part(&params.beta);
            s.index(&params.theta)
                .iter()
                .enumerate()
                .map(|(j, &u)| {
                    let fit = local_linear_fit(&sample, u, h, spec)?;
                    Ok(s.y[j] - zb[j] - fit.a[0])
                })
                .collect()
        })
        .collect()
}

pub fn puls_objective(ds: &LongitudinalDataset, params: &ModelParameters, h: f64, spec: &KernelSpec) -> Result<Objective> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    match profile_residuals(ds, params, h, spec) {
        Ok(res) => {
            // summed in sorted order so the value does not depend on subject order
            let mut sq: Vec<f64> = res.iter().flatten().map(|r| r * r).collect();
            sq.sort_by(f64::total_cmp);
            Ok(Objective { value: sq.iter().sum(), penalized: false })
        }
        Err(Error::InsufficientLocalData { .. }) => {
            Ok(Objective { value: PENALTY_PER_SUBJECT * ds.n() as f64, penalized: true })
        }
        Err(e) => Err(e),
    }
}

/// Pooled least squares of `Y` on `(1, Z, X)`; `beta` from the `Z`
/// coefficients and `theta` from the normalized `X` coefficients.
pub fn default_init(ds: &LongitudinalDataset) -> Result<ModelParameters> {
    let (d, p) = (ds.d, ds.p);
    let k = 1 + d + p;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut row = DVector::<f64>::zeros(k);
    for s in &ds.subjects {
        for j in 0..s.len() {
            row[0] = 1.0;
            for c in 0..d {
                row[1 + c] = s.z[(j, c)];
            }
            for c in 0..p {
                row[1 + d + c] = s.x[(j, c)];
            }
            xtx += &row * row.transpose();
            xty += &row * s.y[j];
        }
    }
    let coef = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .or_else(|| crate::linalg::min_norm_solve(&xtx, &xty, 1e-12).map(|(x, _)| x))
        .ok_or_else(|| Error::DegenerateDesign("pooled regression for the initial value failed".into()))?;
    let beta = coef.rows(1, d).iter().copied().collect();
    let theta = coef.rows(1 + d, p).iter().copied().collect::<Vec<_>>();
    ModelParameters::new(beta, theta)
}

fn normalized_distance(d: usize) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |a: &[f64], b: &[f64]| {
        let na = normalize_theta(&a[d..]);
        let nb = normalize_theta(&b[d..]);
        match (na, nb) {
            (Ok(ta), Ok(tb)) => {
                let beta: f64 = a[..d].iter().zip(&b[..d]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                let theta: f64 = ta.iter().zip(&tb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                beta.max(theta)
            }
            _ => f64::INFINITY,
        }
    }
}

pub fn fit_puls(
    ds: &LongitudinalDataset,
    h: f64,
    spec: &KernelSpec,
    init: &ModelParameters,
    opts: &PulsOptions,
) -> Result<PulsFit> {
    if opts.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if init.d() != ds.d || init.p() != ds.p {
        return Err(Error::DimensionMismatch(format!(
            "initial value has (d, p) = ({}, {}), dataset has ({}, {})",
            init.d(),
            init.p(),
            ds.d,
            ds.p
        )));
    }
    let init = ModelParameters::new(init.beta.clone(), init.theta.clone())?;
    if init.beta.iter().chain(&init.theta).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial value is not finite".into()));
    }
    let d = ds.d;
    let objective = |x: &[f64]| -> f64 {
        match ModelParameters::from_stacked(x, d) {
            Ok(p) => puls_objective(ds, &p, h, spec).map(|o| o.value).unwrap_or(f64::INFINITY),
            Err(_) => PENALTY_PER_SUBJECT * ds.n() as f64,
        }
    };
    let nm = NelderMeadOptions { max_iters: opts.max_iters, xtol: opts.xtol, ftol: opts.ftol };
    let x0 = init.stacked();
    let steps = vec![opts.initial_step; x0.len()];
    let mut run = nelder_mead(objective, &x0, &steps, &nm, normalized_distance(d));
    let mut iterations = run.iterations;
    if opts.restart {
        let small: Vec<f64> = steps.iter().map(|s| s * 0.1).collect();
        let again = nelder_mead(objective, &run.x, &small, &nm, normalized_distance(d));
        iterations += again.iterations;
        if again.f <= run.f {
            run = again;
        } else {
            run.converged = again.converged;
        }
    }
    let params = ModelParameters::from_stacked(&run.x, d)?;
    Ok(PulsFit { params, objective: run.f, iterations, converged: run.converged })
}
