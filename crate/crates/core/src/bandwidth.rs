//! Leave-one-subject-out cross-validation for the link bandwidth `h` and the
//! log-variance bandwidth `h1`.

use serde::{Deserialize, Serialize};

use crate::covariance::log_variance_sample;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::kernel::{local_linear_fit, profile_link, KernelSpec};
use crate::puls::{default_init, fit_puls, PulsOptions};

/// Number of candidates in the automatic grid.
pub const DEFAULT_GRID_POINTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<f64>,
    /// Weighted squared prediction error; `+inf` marks infeasible candidates.
    pub scores: Vec<f64>,
    pub best: f64,
}

fn pick_best(grid: Vec<f64>, scores: Vec<f64>) -> Result<CvResult> {
    let mut best: Option<(f64, f64)> = None;
    for (&h, &s) in grid.iter().zip(&scores) {
        if !s.is_finite() {
            continue;
        }
        // ties go to the larger bandwidth
        best = match best {
            Some((bh, bs)) if s > bs || (s == bs && h <= bh) => Some((bh, bs)),
            _ => Some((h, s)),
        };
    }
    let (best, _) = best.ok_or_else(|| Error::InvalidArgument("every bandwidth candidate is infeasible".into()))?;
    Ok(CvResult { grid, scores, best })
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::InvalidArgument("bandwidth grid must be non-empty and positive".into()));
    }
    Ok(())
}

/// `points` geometric values spanning `[0.25, 4] * base`.
pub fn geometric_grid(base: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (0.25 * base, 4.0 * base);
    if points == 1 {
        return vec![base];
    }
    let ratio = (hi / lo).powf(1.0 / (points - 1) as f64);
    (0..points).map(|k| lo * ratio.powi(k as i32)).collect()
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Rule-of-thumb scale `sd(values) * T_n^{-1/5}`.
pub fn rule_of_thumb(values: &[f64]) -> Result<f64> {
    let sd = sample_sd(values);
    if !(sd > 0.0) || values.len() < 2 {
        return Err(Error::DegenerateDesign("values have zero spread".into()));
    }
    Ok(sd * (values.len() as f64).powf(-0.2))
}

/// Candidate link bandwidths around the rule of thumb for the index under the
/// pooled-regression pilot direction.
pub fn default_grid(ds: &LongitudinalDataset) -> Result<Vec<f64>> {
    let pilot = default_init(ds)?;
    let idx = ds.pooled_index(&pilot.theta);
    Ok(geometric_grid(rule_of_thumb(&idx)?, DEFAULT_GRID_POINTS))
}

/// Candidate variance bandwidths around the rule of thumb for the times.
pub fn default_variance_grid(ds: &LongitudinalDataset) -> Result<Vec<f64>> {
    let times: Vec<f64> = ds.subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
    Ok(geometric_grid(rule_of_thumb(&times)?, DEFAULT_GRID_POINTS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    /// Options for the full-data fit at each candidate.
    pub full: PulsOptions,
    /// Options for the leave-one-out refits, started at the full-data fit.
    pub refit: PulsOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            full: PulsOptions::default(),
            refit: PulsOptions { initial_step: 0.02, xtol: 1e-6, ftol: 1e-9, restart: false, ..PulsOptions::default() },
        }
    }
}

/// Fraction of the pooled index trimmed from each tail of the link CV score.
/// Held-out points beyond the extremes of the remaining data cannot be
/// predicted with a compact-support kernel at any useful bandwidth.
pub const LINK_CV_TRIM: f64 = 0.025;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Squared prediction error for subject `i` under a PULS fit without it,
/// weighted by `1 / (n m_i)`, over the held-out points whose index lies in
/// `window`. `None` when such a prediction is not computable.
fn loo_subject_error(
    ds: &LongitudinalDataset,
    i: usize,
    h: f64,
    spec: &KernelSpec,
    start: &crate::data::ModelParameters,
    window: (f64, f64),
    opts: &PulsOptions,
) -> Result<Option<f64>> {
    let rest = ds.without_subject(i)?;
    let fit = fit_puls(&rest, h, spec, start, opts)?;
    let s = &ds.subjects[i];
    let zb = s.linear_part(&fit.params.beta);
    let (idx, resid): (Vec<f64>, Vec<f64>) = s
        .index(&fit.params.theta)
        .into_iter()
        .zip(s.y.iter().zip(&zb).map(|(y, zb)| y - zb))
        .filter(|(u, _)| (window.0..=window.1).contains(u))
        .unzip();
    if idx.is_empty() {
        return Ok(Some(0.0));
    }
    let link = match profile_link(&rest, &fit.params, h, spec, &idx) {
        Ok(l) => l,
        Err(Error::InsufficientLocalData { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let sse: f64 = resid.iter().zip(&link.eta).map(|(r, e)| (r - e).powi(2)).sum();
    Ok(Some(sse / (ds.n() as f64 * s.len() as f64)))
}

fn link_score(ds: &LongitudinalDataset, h: f64, spec: &KernelSpec, opts: &CvOptions) -> Result<f64> {
    let init = default_init(ds)?;
    let full = fit_puls(ds, h, spec, &init, &opts.full)?;
    let mut idx = ds.pooled_index(&full.params.theta);
    idx.sort_by(f64::total_cmp);
    let window = (quantile(&idx, LINK_CV_TRIM), quantile(&idx, 1.0 - LINK_CV_TRIM));
    let errors = map_subjects(ds.n(), |i| loo_subject_error(ds, i, h, spec, &full.params, window, &opts.refit))?;
    Ok(errors.into_iter().map(|e| e.unwrap_or(f64::INFINITY)).sum())
}

/// Leave-one-subject-out CV of the PULS link bandwidth. Candidates for which
/// some held-out point in the trimmed window cannot be predicted score `+inf`.
pub fn cv_link_bandwidth(ds: &LongitudinalDataset, grid: &[f64], spec: &KernelSpec, opts: &CvOptions) -> Result<CvResult> {
    check_grid(grid)?;
    if ds.n() < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least two subjects".into()));
    }
    let scores = grid.iter().map(|&h| link_score(ds, h, spec, opts)).collect::<Result<Vec<_>>>()?;
    pick_best(grid.to_vec(), scores)
}

/// Leave-one-subject-out CV of the bandwidth for the log squared residuals
/// against time.
pub fn cv_variance_bandwidth(times: &[Vec<f64>], r_hat: &[Vec<f64>], grid: &[f64], spec: &KernelSpec) -> Result<CvResult> {
    check_grid(grid)?;
    let n = times.len();
    if n < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least two subjects".into()));
    }
    let (_, zeta) = log_variance_sample(times, r_hat)?;
    let scores = grid
        .iter()
        .map(|&h1| {
            let errors = map_subjects(n, |i| {
                let t_rest: Vec<Vec<f64>> = times.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, t)| t.clone()).collect();
                let r_rest: Vec<Vec<f64>> = r_hat.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, r)| r.clone()).collect();
                let (sample, _) = log_variance_sample(&t_rest, &r_rest)?;
                let mut sse = 0.0;
                for (&t, &r) in times[i].iter().zip(&r_hat[i]) {
                    match local_linear_fit(&sample, t, h1, spec) {
                        Ok(fit) => sse += ((r + zeta).ln() - fit.a[0]).powi(2),
                        Err(Error::InsufficientLocalData { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
                Ok(Some(sse / (n as f64 * times[i].len() as f64)))
            })?;
            Ok(errors.into_iter().map(|e| e.unwrap_or(f64::INFINITY)).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    pick_best(grid.to_vec(), scores)
}

#[cfg(feature = "parallel")]
fn map_subjects<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_subjects<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    (0..n).map(f).collect()
}
