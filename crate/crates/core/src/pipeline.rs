//! The two-stage estimation procedure: PULS, working covariance from the PULS
//! residuals, correlation parameter selection, then SGEE.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    estimate_variance_function, residual_squares, select_phi, variance_diagonals, working_covariance,
    CorrelationKind, PhiCriterionInputs, PhiSelection, VarianceFunctionEstimate,
};
use crate::data::{LongitudinalDataset, ModelParameters};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::puls::{default_init, fit_puls, profile_residuals, PulsFit, PulsOptions};
use crate::sgee::{fit_sgee, smoothed_terms, SgeeFit, SgeeOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub h: f64,
    pub h1: f64,
    pub kernel: KernelSpec,
    pub corr: CorrelationKind,
    /// Rounds of covariance estimation and SGEE; 1 is the plain two-stage fit.
    pub iterate: usize,
    pub puls: PulsOptions,
    pub sgee: SgeeOptions,
    /// Starting value for PULS; the pooled-regression value when absent.
    pub init: Option<ModelParameters>,
}

impl PipelineConfig {
    pub fn new(h: f64, h1: f64, corr: CorrelationKind) -> Self {
        PipelineConfig {
            h,
            h1,
            kernel: KernelSpec::epanechnikov(),
            corr,
            iterate: 1,
            puls: PulsOptions::default(),
            sgee: SgeeOptions::default(),
            init: None,
        }
    }
}

/// Working covariance ingredients estimated from one set of residuals.
#[derive(Debug, Clone)]
pub struct CovarianceStage {
    pub variance: VarianceFunctionEstimate,
    pub phi: PhiSelection,
    pub weights: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub puls: PulsFit,
    pub covariance: CovarianceStage,
    pub sgee: SgeeFit,
}

pub fn run_puls(ds: &LongitudinalDataset, cfg: &PipelineConfig) -> Result<PulsFit> {
    let init = match &cfg.init {
        Some(p) => p.clone(),
        None => default_init(ds)?,
    };
    fit_puls(ds, cfg.h, &cfg.kernel, &init, &cfg.puls)
}

/// Variance function, correlation parameters and weight matrices from the
/// residuals at `params`.
pub fn estimate_covariance(ds: &LongitudinalDataset, params: &ModelParameters, cfg: &PipelineConfig) -> Result<CovarianceStage> {
    let residuals = profile_residuals(ds, params, cfg.h, &cfg.kernel)?;
    let r_hat: Vec<Vec<f64>> = residuals.iter().map(|r| r.iter().map(|e| e * e).collect()).collect();
    covariance_from_squares(ds, params, &r_hat, cfg)
}

fn covariance_from_squares(
    ds: &LongitudinalDataset,
    params: &ModelParameters,
    r_hat: &[Vec<f64>],
    cfg: &PipelineConfig,
) -> Result<CovarianceStage> {
    let times: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.times.clone()).collect();
    let variance = estimate_variance_function(&times, r_hat, cfg.h1, &cfg.kernel)?;
    let sigma2 = variance_diagonals(&variance, ds);
    let terms = smoothed_terms(ds, params, cfg.h, &cfg.kernel)?;
    let inputs = PhiCriterionInputs::new(ds, &terms.residuals, &terms.lambda, &sigma2)?;
    let phi = select_phi(&inputs, cfg.corr)?;
    let weights = working_covariance(&variance, &phi.family, ds)?.into_iter().map(|wc| wc.w).collect();
    Ok(CovarianceStage { variance, phi, weights })
}

pub fn fit_pipeline(ds: &LongitudinalDataset, cfg: &PipelineConfig) -> Result<PipelineFit> {
    if cfg.iterate == 0 {
        return Err(Error::InvalidArgument("iterate must be at least 1".into()));
    }
    let puls = run_puls(ds, cfg)?;
    let r_hat = residual_squares(ds, &puls, cfg.h, &cfg.kernel)?;
    let mut covariance = covariance_from_squares(ds, &puls.params, &r_hat, cfg)?;
    let mut sgee = fit_sgee(ds, cfg.h, &cfg.kernel, &covariance.weights, &puls.params, &cfg.sgee)?;
    for _ in 1..cfg.iterate {
        covariance = estimate_covariance(ds, &sgee.params, cfg)?;
        sgee = fit_sgee(ds, cfg.h, &cfg.kernel, &covariance.weights, &sgee.params, &cfg.sgee)?;
    }
    Ok(PipelineFit { puls, covariance, sgee })
}
