//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string;
//! the page draws the result on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sgee_core::covariance::{correlation_matrix, variance_at, CorrelationFamily, CorrelationKind};
use sgee_core::kernel::{local_linear_fit, uniform_grid, KernelKind, KernelSpec, WeightedSample};
use sgee_core::montecarlo::{generate_dataset, rep_rng, SimConfig};
use sgee_core::pipeline::{fit_pipeline, PipelineConfig};

const CURVE_POINTS: usize = 121;

#[derive(Serialize)]
struct Curve {
    x: Vec<f64>,
    estimated: Vec<f64>,
    truth: Vec<f64>,
}

#[derive(Serialize)]
struct FitOutput {
    truth: Vec<f64>,
    puls: Vec<f64>,
    sgee: Vec<f64>,
    std_errors: Vec<f64>,
    phi: Vec<f64>,
    sgee_converged: bool,
    n_observations: usize,
    link: Curve,
    variance: Curve,
}

fn kernel(gaussian: bool) -> KernelSpec {
    KernelSpec::from_kind(if gaussian { KernelKind::Gaussian } else { KernelKind::Epanechnikov })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Simulates one dataset with AR(1) errors and runs PULS and SGEE.
pub fn simulate_and_fit_json(n: usize, t_max: usize, rho: f64, h: f64, h1: f64, seed: u64) -> Result<String, String> {
    let cfg = SimConfig { n, t_max, corr: CorrelationFamily::ar1(rho), seed, reps: 1, ..Default::default() };
    let ds = generate_dataset(&cfg, 0).map_err(|e| e.to_string())?;
    let fit = fit_pipeline(&ds, &PipelineConfig::new(h, h1, CorrelationKind::Ar1)).map_err(|e| e.to_string())?;
    let link = &fit.sgee.link;
    let t = uniform_grid(0.0, t_max as f64 + 1.0, CURVE_POINTS);
    let variance = Curve {
        estimated: t.iter().map(|&t| variance_at(&fit.covariance.variance, t).0).collect(),
        truth: t.iter().map(|&t| cfg.variance(t)).collect(),
        x: t,
    };
    let out = FitOutput {
        truth: cfg.truth().map_err(|e| e.to_string())?.stacked(),
        puls: fit.puls.params.stacked(),
        sgee: fit.sgee.params.stacked(),
        std_errors: fit.sgee.std_errors.clone(),
        phi: fit.covariance.phi.family.phi.clone(),
        sgee_converged: fit.sgee.converged,
        n_observations: ds.total_obs(),
        link: Curve {
            x: link.grid.clone(),
            estimated: link.eta.clone(),
            truth: link.grid.iter().map(|&u| SimConfig::link(u)).collect(),
        },
        variance,
    };
    to_json(&out)
}

#[derive(Serialize)]
struct SmoothOutput {
    u: Vec<f64>,
    y: Vec<f64>,
    curve: Curve,
    slope: Vec<f64>,
}

/// Noisy draws from `0.5 exp(u)` on `[-2, 2]` and their local linear fit.
pub fn smooth_json(points: usize, noise_sd: f64, h: f64, gaussian: bool, seed: u64) -> Result<String, String> {
    use sgee_core::montecarlo::gp_errors;
    if points < 3 {
        return Err("need at least three points".into());
    }
    let mut rng = rep_rng(seed, 0);
    let u: Vec<f64> = uniform_grid(-2.0, 2.0, points);
    let e = gp_errors(&u, &|_| noise_sd * noise_sd, &CorrelationFamily::independence(), &mut rng)
        .map_err(|e| e.to_string())?;
    let y: Vec<f64> = u.iter().zip(&e).map(|(&u, e)| SimConfig::link(u) + e).collect();
    let sample = WeightedSample::from_vector(&u, &y, &vec![1.0; points]).map_err(|e| e.to_string())?;
    let grid = uniform_grid(-2.0, 2.0, CURVE_POINTS);
    let spec = kernel(gaussian);
    let mut est = Vec::with_capacity(grid.len());
    let mut slope = Vec::with_capacity(grid.len());
    for &g in &grid {
        match local_linear_fit(&sample, g, h, &spec) {
            Ok(f) => {
                est.push(f.a[0]);
                slope.push(f.b[0]);
            }
            Err(_) => {
                est.push(f64::NAN);
                slope.push(f64::NAN);
            }
        }
    }
    let truth = grid.iter().map(|&g| SimConfig::link(g)).collect();
    // NaN is not valid JSON; gaps become null
    let out = SmoothOutput { u, y, curve: Curve { x: grid, estimated: est, truth }, slope };
    to_json(&out)
}

#[derive(Serialize)]
struct CorrelationOutput {
    times: Vec<f64>,
    matrix: Vec<Vec<f64>>,
}

/// Working correlation `gamma * rho^|t - s|` at the given times.
pub fn correlation_json(gamma: f64, rho: f64, times: &[f64]) -> Result<String, String> {
    let family = if gamma >= 1.0 { CorrelationFamily::ar1(rho) } else { CorrelationFamily::arma11(gamma, rho) };
    let c = correlation_matrix(&family, times).map_err(|e| e.to_string())?;
    let matrix = (0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect();
    to_json(&CorrelationOutput { times: times.to_vec(), matrix })
}

#[wasm_bindgen]
pub fn simulate_and_fit(n: usize, t_max: usize, rho: f64, h: f64, h1: f64, seed: u32) -> Result<String, JsValue> {
    simulate_and_fit_json(n, t_max, rho, h, h1, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn smooth(points: usize, noise_sd: f64, h: f64, gaussian: bool, seed: u32) -> Result<String, JsValue> {
    smooth_json(points, noise_sd, h, gaussian, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn correlation(gamma: f64, rho: f64, times: Vec<f64>) -> Result<String, JsValue> {
    correlation_json(gamma, rho, &times).map_err(|e| JsValue::from_str(&e))
}
