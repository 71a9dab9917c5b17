//! Kernels and the subject-weighted local linear smoother.
//!
//! Every nonparametric quantity in the estimators (the profile link and its
//! derivative, the conditional means of `Z` and `X` given the index, and the
//! log-variance curve in time) is a local linear fit of the form
//!
//! ```text
//! min_{a,b} sum_j w_j K((u_j - u0)/h) / h * (y_j - a - b (u_j - u0))^2
//! ```
//!
//! solved through its 2×2 normal equations. Vector-valued targets share the
//! design and are solved column by column.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, ModelParameters};
use crate::error::{Error, Result};

/// Fits whose total kernel mass is below this are rejected.
pub const MIN_KERNEL_MASS: f64 = 1e-10;
/// Condition number above which the local design receives a ridge.
pub const RIDGE_CONDITION: f64 = 1e12;
/// Ridge size relative to the trace of the local design.
pub const RIDGE_FACTOR: f64 = 1e-8;
/// Number of points in the reporting grid for link curves.
pub const LINK_GRID_POINTS: usize = 201;

const GAUSSIAN_CUTOFF: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Epanechnikov,
    Gaussian,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(KernelKind::Epanechnikov),
            "gaussian" | "normal" => Ok(KernelKind::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Points farther than `support_radius * h` from the target get no weight.
    pub support_radius: f64,
}

impl KernelSpec {
    pub fn epanechnikov() -> Self {
        KernelSpec { kind: KernelKind::Epanechnikov, support_radius: 1.0 }
    }

    pub fn gaussian() -> Self {
        KernelSpec { kind: KernelKind::Gaussian, support_radius: GAUSSIAN_CUTOFF }
    }

    pub fn from_kind(kind: KernelKind) -> Self {
        match kind {
            KernelKind::Epanechnikov => Self::epanechnikov(),
            KernelKind::Gaussian => Self::gaussian(),
        }
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        kernel_eval(self, u)
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

#[inline]
pub fn kernel_eval(spec: &KernelSpec, u: f64) -> f64 {
    match spec.kind {
        KernelKind::Epanechnikov => {
            if u.abs() <= 1.0 {
                0.75 * (1.0 - u * u)
            } else {
                0.0
            }
        }
        KernelKind::Gaussian => {
            if u.abs() > spec.support_radius {
                0.0
            } else {
                (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
        }
    }
}

/// Design points with (possibly vector-valued) targets and observation
/// weights. Points are kept sorted by `u` so each fit only visits its window.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    u: Vec<f64>,
    w: Vec<f64>,
    /// Row-major, `u.len() × ncols`.
    targets: Vec<f64>,
    ncols: usize,
}

impl WeightedSample {
    /// `targets` has one row per design point.
    pub fn new(u: &[f64], targets: &DMatrix<f64>, w: &[f64]) -> Result<Self> {
        let n = u.len();
        if targets.nrows() != n || w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "weighted sample: {n} points, {} target rows, {} weights",
                targets.nrows(),
                w.len()
            )));
        }
        let ncols = targets.ncols();
        let mut rows = Vec::with_capacity(n * ncols);
        for j in 0..n {
            rows.extend(targets.row(j).iter().copied());
        }
        Self::from_rows(u.to_vec(), rows, ncols, w.to_vec())
    }

    pub fn from_vector(u: &[f64], y: &[f64], w: &[f64]) -> Result<Self> {
        if y.len() != u.len() || w.len() != u.len() {
            return Err(Error::DimensionMismatch(format!(
                "weighted sample: {} points, {} targets, {} weights",
                u.len(),
                y.len(),
                w.len()
            )));
        }
        Self::from_rows(u.to_vec(), y.to_vec(), 1, w.to_vec())
    }

    /// Row-major targets, `ncols` values per point.
    pub fn from_rows(u: Vec<f64>, targets: Vec<f64>, ncols: usize, w: Vec<f64>) -> Result<Self> {
        let n = u.len();
        if targets.len() != n * ncols || w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "weighted sample: {n} points, {} target values for {ncols} columns, {} weights",
                targets.len(),
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || !w.iter().any(|&x| x > 0.0) {
            return Err(Error::InvalidArgument("weights must be finite, non-negative and not all zero".into()));
        }
        if u.iter().any(|x| !x.is_finite()) || targets.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weighted sample contains non-finite values".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
        let su = order.iter().map(|&k| u[k]).collect();
        let sw = order.iter().map(|&k| w[k]).collect();
        let mut st = Vec::with_capacity(targets.len());
        for &k in &order {
            st.extend_from_slice(&targets[k * ncols..(k + 1) * ncols]);
        }
        Ok(WeightedSample { u: su, w: sw, targets: st, ncols })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Smallest and largest design point.
    pub fn range(&self) -> (f64, f64) {
        (self.u[0], self.u[self.u.len() - 1])
    }

    /// Multiplies every weight by `c`.
    pub fn scale_weights(&mut self, c: f64) {
        self.w.iter_mut().for_each(|w| *w *= c);
    }
}

/// Local intercepts `a` (function estimates) and slopes `b` (derivative
/// estimates), one per target column.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub effective_mass: f64,
    /// The local design was ill-conditioned and a ridge was added.
    pub ridged: bool,
}

pub fn local_linear_fit(sample: &WeightedSample, u0: f64, h: f64, spec: &KernelSpec) -> Result<LocalFit> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    let radius = spec.support_radius * h;
    let start = sample.u.partition_point(|&u| u < u0 - radius);
    let end = sample.u.partition_point(|&u| u <= u0 + radius);
    let nc = sample.ncols;

    // Moments in the bandwidth-scaled distance v = (u - u0)/h.
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let mut t0 = vec![0.0; nc];
    let mut t1 = vec![0.0; nc];
    for j in start..end {
        let v = (sample.u[j] - u0) / h;
        let k = sample.w[j] * spec.eval(v) / h;
        if k == 0.0 {
            continue;
        }
        s0 += k;
        s1 += k * v;
        s2 += k * v * v;
        let row = &sample.targets[j * nc..(j + 1) * nc];
        for c in 0..nc {
            t0[c] += k * row[c];
            t1[c] += k * v * row[c];
        }
    }
    if s0 < MIN_KERNEL_MASS {
        return Err(Error::InsufficientLocalData { at: u0, mass: s0 });
    }

    let trace = s0 + s2;
    let disc = ((s0 - s2) * (s0 - s2) + 4.0 * s1 * s1).sqrt();
    let lmax = 0.5 * (trace + disc);
    let lmin = 0.5 * (trace - disc);
    let ridged = !(lmin > 0.0) || lmax / lmin > RIDGE_CONDITION;
    let (d0, d2) = if ridged {
        let lambda = RIDGE_FACTOR * trace;
        (s0 + lambda, s2 + lambda)
    } else {
        (s0, s2)
    };
    let det = d0 * d2 - s1 * s1;

    let mut a = vec![0.0; nc];
    let mut b = vec![0.0; nc];
    for c in 0..nc {
        a[c] = (d2 * t0[c] - s1 * t1[c]) / det;
        b[c] = (d0 * t1[c] - s1 * t0[c]) / det / h;
    }
    Ok(LocalFit { a, b, effective_mass: s0, ridged })
}

/// Link estimate and its derivative on a set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEstimate {
    pub grid: Vec<f64>,
    pub eta: Vec<f64>,
    pub eta_dot: Vec<f64>,
}

/// Pooled sample `(X_ij' theta, Y_ij - Z_ij' beta)` with weights `1/(n m_i)`.
pub fn profile_sample(ds: &LongitudinalDataset, params: &ModelParameters) -> Result<WeightedSample> {
    let weights = ds.subject_weights();
    let mut u = Vec::with_capacity(ds.total_obs());
    let mut y = Vec::with_capacity(ds.total_obs());
    let mut w = Vec::with_capacity(ds.total_obs());
    for (s, &wi) in ds.subjects.iter().zip(&weights) {
        let zb = s.linear_part(&params.beta);
        u.extend(s.index(&params.theta));
        y.extend(s.y.iter().zip(&zb).map(|(y, zb)| y - zb));
        w.extend(std::iter::repeat_n(wi, s.len()));
    }
    WeightedSample::from_rows(u, y, 1, w)
}

/// Profile local linear estimate of the link and its derivative at `eval_points`.
pub fn profile_link(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    h: f64,
    spec: &KernelSpec,
    eval_points: &[f64],
) -> Result<LinkEstimate> {
    let sample = profile_sample(ds, params)?;
    let mut eta = Vec::with_capacity(eval_points.len());
    let mut eta_dot = Vec::with_capacity(eval_points.len());
    for &u in eval_points {
        let fit = local_linear_fit(&sample, u, h, spec)?;
        eta.push(fit.a[0]);
        eta_dot.push(fit.b[0]);
    }
    Ok(LinkEstimate { grid: eval_points.to_vec(), eta, eta_dot })
}

/// Local linear estimate of `E[targets | index = u0]`, one value per column.
pub fn conditional_mean_smooth(
    index: &[f64],
    targets: &DMatrix<f64>,
    weights: &[f64],
    u0: f64,
    h: f64,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    let sample = WeightedSample::new(index, targets, weights)?;
    Ok(local_linear_fit(&sample, u0, h, spec)?.a)
}

/// `points` equally spaced values spanning `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => {
            let step = (hi - lo) / (points - 1) as f64;
            (0..points).map(|k| if k + 1 == points { hi } else { lo + step * k as f64 }).collect()
        }
    }
}
