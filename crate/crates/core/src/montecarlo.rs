//! Simulation design and the replication harness.
//!
//! Each subject has scheduled times `0, 1, ..., T`; times `1..T` are skipped
//! independently with probability `skip_prob` and every kept time is
//! perturbed by `U(0, 1)`. Covariates are drawn per observation, errors
//! come from a Gaussian process with variance `a * exp(t / b)` and
//! correlation `gamma * rho^|t - s|`, and
//!
//! ```text
//! Y = Z' beta0 + 0.5 exp(X' theta0) + e
//! ```
//!
//! Replication `r` draws from its own ChaCha stream keyed by `(seed, r)`, so
//! results do not depend on how replications are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{cv_link_bandwidth, default_grid, CvOptions};
use crate::covariance::{
    assemble_working_covariance, correlation_matrix, variance_at, CorrelationFamily, CorrelationKind,
};
use crate::data::{normalize_theta, LongitudinalDataset, ModelParameters, SubjectBlock};
use crate::error::{Error, Result};
use crate::kernel::{KernelKind, KernelSpec};
use crate::linalg::cholesky_with_jitter;
use crate::pipeline::{fit_pipeline, run_puls, PipelineConfig};
use crate::sgee::{fit_sgee, SgeeOptions};

/// Stream offset for pilot datasets used in bandwidth selection.
const PILOT_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZKind {
    #[default]
    Gaussian,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    /// Largest scheduled time `T`.
    pub t_max: usize,
    pub skip_prob: f64,
    /// Add `U(0, 1)` to every kept scheduled time.
    pub perturb: bool,
    pub beta0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub corr: CorrelationFamily,
    /// `a` in `sigma2(t) = a exp(t / b)`; zero gives noiseless data.
    pub variance_scale: f64,
    /// `b` in `sigma2(t) = a exp(t / b)`.
    pub variance_timescale: f64,
    pub covariate_corr: f64,
    pub z_kind: ZKind,
    pub seed: u64,
    pub reps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 50,
            t_max: 12,
            skip_prob: 0.2,
            perturb: true,
            beta0: vec![2.0, 1.0],
            theta0: vec![2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0],
            corr: CorrelationFamily::ar1(0.9),
            variance_scale: 0.25,
            variance_timescale: 12.0,
            covariate_corr: 0.1,
            z_kind: ZKind::Gaussian,
            seed: 20240601,
            reps: 200,
        }
    }
}

impl SimConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.skip_prob) {
            return Err(Error::InvalidArgument(format!("skip_prob = {} must lie in [0, 1)", self.skip_prob)));
        }
        if self.n < 2 {
            return Err(Error::InvalidArgument("n must be at least 2".into()));
        }
        if self.reps < 1 {
            return Err(Error::InvalidArgument("reps must be at least 1".into()));
        }
        if self.beta0.is_empty() || self.theta0.is_empty() {
            return Err(Error::InvalidArgument("beta0 and theta0 must be non-empty".into()));
        }
        if !(self.variance_scale >= 0.0) || !(self.variance_timescale > 0.0) {
            return Err(Error::InvalidArgument("variance_scale must be >= 0 and variance_timescale > 0".into()));
        }
        let k = self.beta0.len() + self.theta0.len();
        if !(self.covariate_corr > -1.0 / (k as f64 - 1.0).max(1.0) && self.covariate_corr < 1.0) {
            return Err(Error::InvalidArgument(format!("covariate_corr = {} is not admissible", self.covariate_corr)));
        }
        normalize_theta(&self.theta0)?;
        self.corr.check()
    }

    pub fn truth(&self) -> Result<ModelParameters> {
        ModelParameters::new(self.beta0.clone(), self.theta0.clone())
    }

    /// `sigma2(t)` of the design.
    pub fn variance(&self, t: f64) -> f64 {
        self.variance_scale * (t / self.variance_timescale).exp()
    }

    pub fn link(u: f64) -> f64 {
        0.5 * u.exp()
    }

    /// True covariance `R_i` at the given times.
    pub fn true_covariance(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let c = correlation_matrix(&self.corr, times)?;
        let sd: Vec<f64> = times.iter().map(|&t| self.variance(t).sqrt()).collect();
        Ok(DMatrix::from_fn(times.len(), times.len(), |j, k| sd[j] * c[(j, k)] * sd[k]))
    }
}

/// RNG for replication `rep`.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Draw from `N(0, R)` with `R = Sigma^{1/2} C Sigma^{1/2}`.
pub fn gp_errors<R: Rng + ?Sized>(
    times: &[f64],
    variance: &dyn Fn(f64) -> f64,
    corr: &CorrelationFamily,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = times.len();
    let sigma2: Vec<f64> = times.iter().map(|&t| variance(t)).collect();
    let draws: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    if sigma2.iter().all(|&s| s == 0.0) {
        return Ok(vec![0.0; m]);
    }
    let c = correlation_matrix(corr, times)?;
    let sd: Vec<f64> = sigma2.iter().map(|s| s.sqrt()).collect();
    let r = DMatrix::from_fn(m, m, |j, k| sd[j] * c[(j, k)] * sd[k]);
    let (l, jittered) = cholesky_with_jitter(&r)
        .ok_or_else(|| Error::DegenerateDesign("error covariance is not positive definite".into()))?;
    if jittered {
        log::warn!("error covariance needed diagonal jitter");
    }
    Ok((l * DVector::from_vec(draws)).iter().copied().collect())
}

fn equicorrelation_factor(k: usize, rho: f64) -> Result<DMatrix<f64>> {
    let s = DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { rho });
    s.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidArgument(format!("covariate correlation {rho} is not admissible")))
}

/// Dataset for replication `rep`.
pub fn generate_dataset(cfg: &SimConfig, rep: u64) -> Result<LongitudinalDataset> {
    let mut rng = rep_rng(cfg.seed, rep);
    generate_with(cfg, &mut rng)
}

fn generate_with(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<LongitudinalDataset> {
    cfg.check()?;
    let theta = normalize_theta(&cfg.theta0)?;
    let (d, p) = (cfg.beta0.len(), theta.len());
    let gaussian_dim = match cfg.z_kind {
        ZKind::Gaussian => d + p,
        ZKind::Bernoulli => p,
    };
    let factor = equicorrelation_factor(gaussian_dim, cfg.covariate_corr)?;
    let variance = |t: f64| cfg.variance(t);
    let mut subjects = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut times = vec![0.0];
        for k in 1..=cfg.t_max {
            if rng.random::<f64>() >= cfg.skip_prob {
                times.push(k as f64);
            }
        }
        if cfg.perturb {
            for t in &mut times {
                *t += rng.random::<f64>();
            }
        }
        let m = times.len();
        let mut z = DMatrix::zeros(m, d);
        let mut x = DMatrix::zeros(m, p);
        for j in 0..m {
            let raw: DVector<f64> = DVector::from_fn(gaussian_dim, |_, _| rng.sample(StandardNormal));
            let g = &factor * raw;
            match cfg.z_kind {
                ZKind::Gaussian => {
                    for c in 0..d {
                        z[(j, c)] = g[c];
                    }
                    for c in 0..p {
                        x[(j, c)] = g[d + c];
                    }
                }
                ZKind::Bernoulli => {
                    for c in 0..d {
                        z[(j, c)] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                    }
                    for c in 0..p {
                        x[(j, c)] = g[c];
                    }
                }
            }
        }
        let e = gp_errors(&times, &variance, &cfg.corr, rng)?;
        let y = (0..m)
            .map(|j| {
                let zb: f64 = (0..d).map(|c| z[(j, c)] * cfg.beta0[c]).sum();
                let u: f64 = (0..p).map(|c| x[(j, c)] * theta[c]).sum();
                zb + SimConfig::link(u) + e[j]
            })
            .collect();
        subjects.push(SubjectBlock::new(format!("{}", i + 1), times, y, z, x)?);
    }
    LongitudinalDataset::new(subjects)
}

/// Bias, SD and MAD per parameter over the completed replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub bias: Vec<f64>,
    pub sd: Vec<f64>,
    pub mad: Vec<f64>,
    pub used: usize,
    pub excluded: usize,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Summary of `estimates` (one row per replication). MAD is the unscaled
/// median absolute deviation about the median.
pub fn summarize(estimates: &[Vec<f64>], truth: &[f64]) -> Result<McSummary> {
    if estimates.len() < 2 {
        return Err(Error::InvalidArgument("at least two replications are needed".into()));
    }
    let k = truth.len();
    if estimates.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch("estimate rows differ from the truth length".into()));
    }
    let n = estimates.len() as f64;
    let mut out = McSummary { bias: Vec::new(), sd: Vec::new(), mad: Vec::new(), used: estimates.len(), excluded: 0 };
    for c in 0..k {
        let col: Vec<f64> = estimates.iter().map(|r| r[c]).collect();
        let mean = col.iter().sum::<f64>() / n;
        out.bias.push(mean - truth[c]);
        out.sd.push((col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
        let med = median(&col);
        let dev: Vec<f64> = col.iter().map(|x| (x - med).abs()).collect();
        out.mad.push(median(&dev));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Puls,
    Sgee,
    /// SGEE weighted by the inverse of the true covariance.
    Oracle,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Puls => "PULS",
            Estimator::Sgee => "SGEE",
            Estimator::Oracle => "SGEE-oracle",
        }
    }
}

/// Estimation settings for a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    /// Link bandwidth; chosen by pilot cross-validation when absent.
    pub h: Option<f64>,
    /// Variance bandwidth.
    pub h1: f64,
    pub kernel: KernelKind,
    /// Correlation family fitted by the SGEE stage.
    pub corr: CorrelationKind,
    pub estimators: Vec<Estimator>,
    /// Pilot datasets for bandwidth cross-validation when `h` is absent.
    pub pilot_reps: usize,
    /// Times at which the estimated variance function is recorded.
    pub variance_grid: Vec<f64>,
    pub sgee: SgeeOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            h: None,
            h1: 2.0,
            kernel: KernelKind::Epanechnikov,
            corr: CorrelationKind::Ar1,
            estimators: vec![Estimator::Puls, Estimator::Sgee],
            pilot_reps: 5,
            variance_grid: Vec::new(),
            sgee: SgeeOptions { link_grid_points: 0, std_errors: false, ..SgeeOptions::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub sim: SimConfig,
    pub fit: FitSettings,
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub puls: Option<Vec<f64>>,
    pub sgee: Option<Vec<f64>>,
    pub oracle: Option<Vec<f64>>,
    pub phi: Vec<f64>,
    pub tau_hat: Option<f64>,
    /// Estimated variance at `FitSettings::variance_grid`.
    pub variance: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub h: f64,
    pub truth: Vec<f64>,
    pub records: Vec<RepRecord>,
    pub summaries: Vec<(Estimator, McSummary)>,
}

impl StudyOutput {
    pub fn summary(&self, est: Estimator) -> Option<&McSummary> {
        self.summaries.iter().find(|(e, _)| *e == est).map(|(_, s)| s)
    }

    pub fn estimates(&self, est: Estimator) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .filter_map(|r| match est {
                Estimator::Puls => r.puls.clone(),
                Estimator::Sgee => r.sgee.clone(),
                Estimator::Oracle => r.oracle.clone(),
            })
            .collect()
    }
}

/// Parameter names `beta1.., theta1..`.
pub fn parameter_names(d: usize, p: usize) -> Vec<String> {
    (1..=d).map(|k| format!("beta{k}")).chain((1..=p).map(|k| format!("theta{k}"))).collect()
}

/// Average of the CV-selected link bandwidths over pilot datasets.
pub fn pilot_bandwidth(cfg: &SimConfig, spec: &KernelSpec, pilot_reps: usize) -> Result<f64> {
    let reps = pilot_reps.max(1);
    let mut total = 0.0;
    for k in 0..reps {
        let ds = generate_dataset(cfg, PILOT_STREAM_OFFSET + k as u64)?;
        let grid = default_grid(&ds)?;
        total += cv_link_bandwidth(&ds, &grid, spec, &CvOptions::default())?.best;
    }
    Ok(total / reps as f64)
}

fn run_rep(cfg: &StudyConfig, h: f64, rep: usize) -> RepRecord {
    let mut rec = RepRecord {
        rep,
        puls: None,
        sgee: None,
        oracle: None,
        phi: Vec::new(),
        tau_hat: None,
        variance: Vec::new(),
        error: None,
    };
    if let Err(e) = fill_rep(cfg, h, rep, &mut rec) {
        rec.error = Some(e.to_string());
    }
    rec
}

fn fill_rep(cfg: &StudyConfig, h: f64, rep: usize, rec: &mut RepRecord) -> Result<()> {
    let ds = generate_dataset(&cfg.sim, rep as u64)?;
    let fit = &cfg.fit;
    let mut pc = PipelineConfig::new(h, fit.h1, fit.corr);
    pc.kernel = KernelSpec::from_kind(fit.kernel);
    pc.sgee = fit.sgee;
    let wants = |e: Estimator| fit.estimators.contains(&e);

    let puls = if wants(Estimator::Sgee) {
        let full = fit_pipeline(&ds, &pc)?;
        rec.phi = full.covariance.phi.family.phi.clone();
        rec.tau_hat = Some(full.covariance.variance.tau_hat);
        rec.variance = fit.variance_grid.iter().map(|&t| variance_at(&full.covariance.variance, t).0).collect();
        if full.sgee.converged {
            rec.sgee = Some(full.sgee.params.stacked());
        }
        full.puls
    } else {
        run_puls(&ds, &pc)?
    };
    if wants(Estimator::Puls) && puls.converged {
        rec.puls = Some(puls.params.stacked());
    }
    if wants(Estimator::Oracle) {
        let weights = ds
            .subjects
            .iter()
            .map(|s| {
                let sigma2: Vec<f64> = s.times.iter().map(|&t| cfg.sim.variance(t)).collect();
                let corr = correlation_matrix(&cfg.sim.corr, &s.times)?;
                Ok(assemble_working_covariance(&sigma2, corr)?.w)
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = SgeeOptions { link_grid_points: 0, std_errors: false, ..fit.sgee };
        let oracle = fit_sgee(&ds, h, &pc.kernel, &weights, &puls.params, &opts)?;
        if oracle.converged {
            rec.oracle = Some(oracle.params.stacked());
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn run_reps(cfg: &StudyConfig, h: f64) -> Vec<RepRecord> {
    use rayon::prelude::*;
    (0..cfg.sim.reps).into_par_iter().map(|r| run_rep(cfg, h, r)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_reps(cfg: &StudyConfig, h: f64) -> Vec<RepRecord> {
    (0..cfg.sim.reps).map(|r| run_rep(cfg, h, r)).collect()
}

/// Runs every replication and summarizes each requested estimator.
/// Replications that fail or do not converge are excluded and counted;
/// more than 20% exclusions for any estimator fails the study.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    cfg.sim.check()?;
    let truth = cfg.sim.truth()?;
    let spec = KernelSpec::from_kind(cfg.fit.kernel);
    let h = match cfg.fit.h {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}"))),
        None => pilot_bandwidth(&cfg.sim, &spec, cfg.fit.pilot_reps)?,
    };
    let records = run_reps(cfg, h);
    let truth_vec = truth.stacked();
    let mut summaries = Vec::new();
    let mut estimators = cfg.fit.estimators.clone();
    estimators.sort();
    estimators.dedup();
    for est in estimators {
        let rows: Vec<Vec<f64>> = records
            .iter()
            .filter_map(|r| match est {
                Estimator::Puls => r.puls.clone(),
                Estimator::Sgee => r.sgee.clone(),
                Estimator::Oracle => r.oracle.clone(),
            })
            .collect();
        let excluded = records.len() - rows.len();
        if excluded as f64 > 0.2 * records.len() as f64 {
            let first = records.iter().find_map(|r| r.error.clone()).unwrap_or_else(|| "non-convergence".into());
            return Err(Error::StudyFailure(format!(
                "{}: {excluded} of {} replications failed (first problem: {first})",
                est.label(),
                records.len()
            )));
        }
        if rows.len() < 2 {
            return Err(Error::StudyFailure(format!("{}: fewer than two usable replications", est.label())));
        }
        let mut s = summarize(&rows, &truth_vec)?;
        s.excluded = excluded;
        summaries.push((est, s));
    }
    Ok(StudyOutput { h, truth: truth_vec, records, summaries })
}

/// Summary table as CSV with columns `parameter,method,bias,sd,mad`.
pub fn write_summary_csv<W: std::io::Write>(out: &StudyOutput, d: usize, p: usize, writer: W) -> Result<()> {
    let names = parameter_names(d, p);
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["parameter", "method", "bias", "sd", "mad"])?;
    for (k, name) in names.iter().enumerate() {
        for (est, s) in &out.summaries {
            wtr.write_record([
                name.clone(),
                est.label().to_string(),
                format!("{:.6}", s.bias[k]),
                format!("{:.6}", s.sd[k]),
                format!("{:.6}", s.mad[k]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_arithmetic() {
        let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
        let s = summarize(&rows, &[2.0]).unwrap();
        assert_eq!((s.bias[0], s.sd[0], s.mad[0]), (0.0, 1.0, 1.0));
        let same = vec![vec![0.5, 1.0]; 4];
        let s = summarize(&same, &[0.5, 1.0]).unwrap();
        assert!(s.bias.iter().chain(&s.sd).chain(&s.mad).all(|v| *v == 0.0));
        assert!(summarize(&[vec![1.0]], &[1.0]).is_err());
    }

    #[test]
    fn no_skipping_gives_full_schedule() {
        let cfg = SimConfig { n: 5, skip_prob: 0.0, ..Default::default() };
        let ds = generate_dataset(&cfg, 0).unwrap();
        assert!(ds.subjects.iter().all(|s| s.len() == 13));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SimConfig { n: 4, ..Default::default() };
        assert_eq!(generate_dataset(&cfg, 3).unwrap(), generate_dataset(&cfg, 3).unwrap());
        assert_ne!(generate_dataset(&cfg, 3).unwrap(), generate_dataset(&cfg, 4).unwrap());
    }

    #[test]
    fn config_checks() {
        assert!(SimConfig { skip_prob: 1.0, ..Default::default() }.check().is_err());
        assert!(SimConfig { n: 1, ..Default::default() }.check().is_err());
        assert!(SimConfig { reps: 0, ..Default::default() }.check().is_err());
        assert!(SimConfig { corr: CorrelationFamily::ar1(1.2), ..Default::default() }.check().is_err());
    }
}
