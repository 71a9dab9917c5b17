//! Working covariance estimation, `R_i = Sigma_i^{1/2} C_i(phi) Sigma_i^{1/2}`.
//!
//! The variance function is estimated on the log scale from squared PULS
//! residuals,
//!
//! ```text
//! log(r_ij + zeta_n) ~ local linear in t   ->  s(t)
//! tau_hat     = [ mean_ij r_ij exp(-s(t_ij)) ]^{-1}
//! sigma2(t)   = exp(s(t)) / tau_hat
//! ```
//!
//! with `zeta_n = 1 / T_n`, which keeps the estimate positive and robust to
//! heavy tails. The correlation parameters are chosen by minimizing the
//! generalized variance of the sandwich matrix built from PULS quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::kernel::{local_linear_fit, uniform_grid, KernelSpec, WeightedSample};
use crate::linalg::{cholesky_with_jitter, log_pseudo_det, sym_pinv};
use crate::optim::{euclidean, nelder_mead, NelderMeadOptions};
use crate::puls::{profile_residuals, PulsFit};
use crate::sgee::LambdaBlock;

/// Points in the stored log-variance grid.
pub const VARIANCE_GRID_POINTS: usize = 401;
const RHO_LIMIT: f64 = 0.999;
const GAMMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[serde(alias = "independence")]
    Indep,
    #[default]
    Ar1,
    Arma11,
}

impl std::str::FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indep" | "independence" => Ok(CorrelationKind::Indep),
            "ar1" => Ok(CorrelationKind::Ar1),
            "arma11" => Ok(CorrelationKind::Arma11),
            other => Err(Error::InvalidArgument(format!("unknown correlation family '{other}'"))),
        }
    }
}

impl std::fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrelationKind::Indep => "indep",
            CorrelationKind::Ar1 => "ar1",
            CorrelationKind::Arma11 => "arma11",
        })
    }
}

/// Correlation `gamma * rho^|t - s|` off the diagonal. `phi` is empty for
/// independence, `[rho]` for AR(1) and `[gamma, rho]` for ARMA(1,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFamily {
    pub kind: CorrelationKind,
    pub phi: Vec<f64>,
}

impl CorrelationFamily {
    pub fn independence() -> Self {
        CorrelationFamily { kind: CorrelationKind::Indep, phi: Vec::new() }
    }

    pub fn ar1(rho: f64) -> Self {
        CorrelationFamily { kind: CorrelationKind::Ar1, phi: vec![rho] }
    }

    pub fn arma11(gamma: f64, rho: f64) -> Self {
        CorrelationFamily { kind: CorrelationKind::Arma11, phi: vec![gamma, rho] }
    }

    /// `(gamma, rho)`; independence is `(0, 0)`.
    pub fn gamma_rho(&self) -> (f64, f64) {
        match self.kind {
            CorrelationKind::Indep => (0.0, 0.0),
            CorrelationKind::Ar1 => (1.0, self.phi[0]),
            CorrelationKind::Arma11 => (self.phi[0], self.phi[1]),
        }
    }

    pub fn check(&self) -> Result<()> {
        let expected = match self.kind {
            CorrelationKind::Indep => 0,
            CorrelationKind::Ar1 => 1,
            CorrelationKind::Arma11 => 2,
        };
        if self.phi.len() != expected {
            return Err(Error::ParameterRange(format!("{} expects {expected} parameter(s), got {}", self.kind, self.phi.len())));
        }
        let (gamma, rho) = self.gamma_rho();
        if self.kind != CorrelationKind::Indep && !(rho.abs() < 1.0) {
            return Err(Error::ParameterRange(format!("rho = {rho} must satisfy |rho| < 1")));
        }
        if self.kind == CorrelationKind::Arma11 && !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::ParameterRange(format!("gamma = {gamma} must lie in (0, 1]")));
        }
        Ok(())
    }
}

pub fn correlation_matrix(family: &CorrelationFamily, times: &[f64]) -> Result<DMatrix<f64>> {
    family.check()?;
    let m = times.len();
    if family.kind == CorrelationKind::Indep {
        return Ok(DMatrix::identity(m, m));
    }
    let (gamma, rho) = family.gamma_rho();
    let mut c = DMatrix::identity(m, m);
    for j in 0..m {
        for k in (j + 1)..m {
            let lag = (times[j] - times[k]).abs();
            if rho < 0.0 && lag.fract() != 0.0 {
                return Err(Error::ParameterRange(format!("negative rho = {rho} needs integer lags, got {lag}")));
            }
            let v = gamma * rho.powf(lag);
            c[(j, k)] = v;
            c[(k, j)] = v;
        }
    }
    Ok(c)
}

/// Squared PULS residuals `r_ij`, one vector per subject.
pub fn residual_squares(ds: &LongitudinalDataset, puls: &PulsFit, h: f64, spec: &KernelSpec) -> Result<Vec<Vec<f64>>> {
    if !puls.converged {
        log::warn!("residual squares taken from a non-converged PULS fit");
    }
    Ok(profile_residuals(ds, &puls.params, h, spec)?
        .into_iter()
        .map(|r| r.into_iter().map(|e| e * e).collect())
        .collect())
}

/// Smoothed `log(r + zeta_n)` on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogVarianceCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub h1: f64,
    pub zeta_n: f64,
}

impl LogVarianceCurve {
    /// Linear interpolation on the grid; outside it the boundary value is
    /// used and the second component is `true`.
    pub fn eval(&self, t: f64) -> (f64, bool) {
        let n = self.grid.len();
        let (lo, hi) = (self.grid[0], self.grid[n - 1]);
        if n == 1 || t <= lo {
            return (self.values[0], t < lo);
        }
        if t >= hi {
            return (self.values[n - 1], t > hi);
        }
        let k = self.grid.partition_point(|&g| g <= t).clamp(1, n - 1);
        let (g0, g1) = (self.grid[k - 1], self.grid[k]);
        let frac = (t - g0) / (g1 - g0);
        (self.values[k - 1] + frac * (self.values[k] - self.values[k - 1]), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFunctionEstimate {
    pub log_curve: LogVarianceCurve,
    pub tau_hat: f64,
}

fn check_shapes(times: &[Vec<f64>], r_hat: &[Vec<f64>]) -> Result<()> {
    if times.len() != r_hat.len() || times.iter().zip(r_hat).any(|(t, r)| t.len() != r.len()) {
        return Err(Error::DimensionMismatch("times and squared residuals differ in shape".into()));
    }
    if times.is_empty() || times.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Subject-weighted sample of `(t_ij, log(r_ij + zeta_n))`.
pub fn log_variance_sample(times: &[Vec<f64>], r_hat: &[Vec<f64>]) -> Result<(WeightedSample, f64)> {
    check_shapes(times, r_hat)?;
    let n = times.len() as f64;
    let total: usize = times.iter().map(Vec::len).sum();
    let zeta = 1.0 / total as f64;
    let mut u = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    let mut w = Vec::with_capacity(total);
    for (t, r) in times.iter().zip(r_hat) {
        let wi = 1.0 / (n * t.len() as f64);
        for (&tj, &rj) in t.iter().zip(r) {
            u.push(tj);
            y.push((rj + zeta).ln());
            w.push(wi);
        }
    }
    Ok((WeightedSample::from_rows(u, y, 1, w)?, zeta))
}

pub fn fit_log_variance(times: &[Vec<f64>], r_hat: &[Vec<f64>], h1: f64, spec: &KernelSpec) -> Result<LogVarianceCurve> {
    let (sample, zeta_n) = log_variance_sample(times, r_hat)?;
    let (lo, hi) = sample.range();
    let grid = uniform_grid(lo, hi, VARIANCE_GRID_POINTS);
    let values = grid
        .iter()
        .map(|&t| local_linear_fit(&sample, t, h1, spec).map(|f| f.a[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogVarianceCurve { grid, values, h1, zeta_n })
}

pub fn estimate_tau(times: &[Vec<f64>], r_hat: &[Vec<f64>], curve: &LogVarianceCurve) -> Result<f64> {
    check_shapes(times, r_hat)?;
    let total: usize = times.iter().map(Vec::len).sum();
    let mean = times
        .iter()
        .zip(r_hat)
        .flat_map(|(t, r)| t.iter().zip(r))
        .map(|(&t, &r)| r * (-curve.eval(t).0).exp())
        .sum::<f64>()
        / total as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::DegenerateVariance("all squared residuals are zero".into()));
    }
    Ok(1.0 / mean)
}

/// Log-scale smoothing followed by the scale correction.
pub fn estimate_variance_function(
    times: &[Vec<f64>],
    r_hat: &[Vec<f64>],
    h1: f64,
    spec: &KernelSpec,
) -> Result<VarianceFunctionEstimate> {
    let log_curve = fit_log_variance(times, r_hat, h1, spec)?;
    let tau_hat = estimate_tau(times, r_hat, &log_curve)?;
    Ok(VarianceFunctionEstimate { log_curve, tau_hat })
}

/// `sigma2_hat(t) = exp(s(t)) / tau_hat`; the flag marks extrapolation.
pub fn variance_at(vfe: &VarianceFunctionEstimate, t: f64) -> (f64, bool) {
    let (s, outside) = vfe.log_curve.eval(t);
    (s.exp() / vfe.tau_hat, outside)
}

/// Estimated variances at each subject's observation times.
pub fn variance_diagonals(vfe: &VarianceFunctionEstimate, ds: &LongitudinalDataset) -> Vec<Vec<f64>> {
    ds.subjects
        .iter()
        .map(|s| s.times.iter().map(|&t| variance_at(vfe, t).0).collect())
        .collect()
}

/// Inverse of `D C D` with `D = diag(sqrt(sigma2))`.
fn scaled_inverse(sigma2: &[f64], corr: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let m = sigma2.len();
    let (l, jittered) = cholesky_with_jitter(corr)
        .ok_or_else(|| Error::DegenerateDesign("correlation matrix is not positive definite".into()))?;
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or_else(|| Error::DegenerateDesign("singular correlation factor".into()))?;
    let cinv = linv.transpose() * linv;
    let dinv: Vec<f64> = sigma2.iter().map(|s| 1.0 / s.sqrt()).collect();
    let w = DMatrix::from_fn(m, m, |j, k| dinv[j] * cinv[(j, k)] * dinv[k]);
    Ok(((&w + w.transpose()) * 0.5, jittered))
}

/// Inputs for the generalized-variance criterion, computed once at the
/// PULS fit.
#[derive(Debug, Clone)]
pub struct PhiCriterionInputs<'a> {
    pub times: Vec<&'a [f64]>,
    pub residuals: &'a [DVector<f64>],
    pub lambda: &'a [LambdaBlock],
    pub sigma2: &'a [Vec<f64>],
}

impl<'a> PhiCriterionInputs<'a> {
    pub fn new(
        ds: &'a LongitudinalDataset,
        residuals: &'a [DVector<f64>],
        lambda: &'a [LambdaBlock],
        sigma2: &'a [Vec<f64>],
    ) -> Result<Self> {
        let n = ds.n();
        if residuals.len() != n || lambda.len() != n || sigma2.len() != n {
            return Err(Error::DimensionMismatch("phi criterion inputs do not match the number of subjects".into()));
        }
        Ok(PhiCriterionInputs { times: ds.subjects.iter().map(|s| s.times.as_slice()).collect(), residuals, lambda, sigma2 })
    }
}

/// Log generalized variance `log pdet(Omega0^+ Omega1 Omega0^+)` at `family`.
/// The pseudo-determinant is taken over the range of `Omega0`.
pub fn generalized_variance(inputs: &PhiCriterionInputs<'_>, family: &CorrelationFamily) -> Result<f64> {
    let k = inputs.lambda[0].0.ncols();
    let mut omega0 = DMatrix::zeros(k, k);
    let mut omega1 = DMatrix::zeros(k, k);
    for i in 0..inputs.lambda.len() {
        let corr = correlation_matrix(family, inputs.times[i])?;
        let (w, _) = scaled_inverse(&inputs.sigma2[i], &corr)?;
        let lam = &inputs.lambda[i].0;
        let wl = &w * lam;
        omega0 += lam.transpose() * &wl;
        let score = wl.transpose() * &inputs.residuals[i];
        omega1 += &score * score.transpose();
    }
    if omega1.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateVariance("all residuals are zero".into()));
    }
    let (pinv, rank) = sym_pinv(&omega0);
    let sand = &pinv * omega1 * &pinv;
    Ok(log_pseudo_det(&sand, rank))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSelection {
    pub family: CorrelationFamily,
    /// Log generalized variance at the selected parameters.
    pub objective: f64,
    pub evaluations: usize,
}

fn family_from(kind: CorrelationKind, x: &[f64]) -> CorrelationFamily {
    match kind {
        CorrelationKind::Indep => CorrelationFamily::independence(),
        CorrelationKind::Ar1 => CorrelationFamily::ar1(x[0]),
        CorrelationKind::Arma11 => CorrelationFamily::arma11(x[0], x[1]),
    }
}

fn clamp_phi(kind: CorrelationKind, x: &[f64]) -> (Vec<f64>, bool) {
    let mut out = x.to_vec();
    match kind {
        CorrelationKind::Indep => {}
        CorrelationKind::Ar1 => out[0] = out[0].clamp(-RHO_LIMIT, RHO_LIMIT),
        CorrelationKind::Arma11 => {
            out[0] = out[0].clamp(GAMMA_FLOOR, 1.0);
            out[1] = out[1].clamp(-RHO_LIMIT, RHO_LIMIT);
        }
    }
    let clamped = out != x;
    (out, clamped)
}

/// Grid of candidate `phi` values for a family.
pub fn phi_grid(kind: CorrelationKind) -> Vec<Vec<f64>> {
    let rhos: Vec<f64> = (-19..=19).map(|k| k as f64 * 0.05).collect();
    match kind {
        CorrelationKind::Indep => vec![Vec::new()],
        CorrelationKind::Ar1 => rhos.iter().map(|&r| vec![r]).collect(),
        CorrelationKind::Arma11 => (1..=20)
            .flat_map(|g| rhos.iter().map(move |&r| vec![g as f64 * 0.05, r]))
            .collect(),
    }
}

/// Minimum generalized variance choice of `phi`: grid search, then
/// Nelder–Mead refinement from the best grid point. Candidates that are not
/// admissible for the observed times (e.g. negative `rho` with fractional
/// lags) are skipped.
pub fn select_phi(inputs: &PhiCriterionInputs<'_>, kind: CorrelationKind) -> Result<PhiSelection> {
    if kind == CorrelationKind::Indep {
        let family = CorrelationFamily::independence();
        let objective = generalized_variance(inputs, &family)?;
        return Ok(PhiSelection { family, objective, evaluations: 1 });
    }
    let eval = |x: &[f64]| -> Result<f64> {
        match generalized_variance(inputs, &family_from(kind, x)) {
            Err(Error::ParameterRange(_)) => Ok(f64::INFINITY),
            other => other,
        }
    };
    let grid = phi_grid(kind);
    let scores = evaluate_grid(&grid, &eval)?;
    let mut evaluations = grid.len();
    let (best_k, best) = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    if !best.is_finite() {
        return Err(Error::DegenerateDesign("no admissible correlation parameter on the grid".into()));
    }

    let mut warned = false;
    let objective = |x: &[f64]| -> f64 {
        let (xc, clamped) = clamp_phi(kind, x);
        if clamped && !warned {
            log::warn!("correlation parameter search left the admissible region; clamped to {xc:?}");
            warned = true;
        }
        eval(&xc).unwrap_or(f64::INFINITY)
    };
    let x0 = grid[best_k].clone();
    let steps = vec![0.025; x0.len()];
    let opts = NelderMeadOptions { max_iters: 200, xtol: 1e-6, ftol: 1e-10 };
    let run = nelder_mead(objective, &x0, &steps, &opts, euclidean);
    evaluations += run.evaluations;
    let (x, f) = if run.f < best { (clamp_phi(kind, &run.x).0, run.f) } else { (x0, best) };
    Ok(PhiSelection { family: family_from(kind, &x), objective: f, evaluations })
}

#[cfg(feature = "parallel")]
fn evaluate_grid<F>(grid: &[Vec<f64>], eval: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    use rayon::prelude::*;
    grid.par_iter().map(|x| eval(x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn evaluate_grid<F>(grid: &[Vec<f64>], eval: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    grid.iter().map(|x| eval(x)).collect()
}

/// Assembled working covariance for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingCovariance {
    pub sigma2: Vec<f64>,
    pub corr: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub jittered: bool,
}

/// Builds `R_i = D C_i D` and `W_i = R_i^{-1}` from variances `sigma2`.
pub fn assemble_working_covariance(sigma2: &[f64], corr: DMatrix<f64>) -> Result<WorkingCovariance> {
    if sigma2.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::DegenerateVariance("variances must be positive and finite".into()));
    }
    let m = sigma2.len();
    let sd: Vec<f64> = sigma2.iter().map(|s| s.sqrt()).collect();
    let r = DMatrix::from_fn(m, m, |j, k| sd[j] * corr[(j, k)] * sd[k]);
    let (w, jittered) = scaled_inverse(sigma2, &corr)?;
    if jittered {
        log::warn!("working covariance was not positive definite; diagonal jitter added");
    }
    Ok(WorkingCovariance { sigma2: sigma2.to_vec(), corr, r, w, jittered })
}

pub fn working_covariance(
    vfe: &VarianceFunctionEstimate,
    family: &CorrelationFamily,
    ds: &LongitudinalDataset,
) -> Result<Vec<WorkingCovariance>> {
    ds.subjects
        .iter()
        .map(|s| {
            let sigma2: Vec<f64> = s.times.iter().map(|&t| variance_at(vfe, t).0).collect();
            assemble_working_covariance(&sigma2, correlation_matrix(family, &s.times)?)
        })
        .collect()
}
