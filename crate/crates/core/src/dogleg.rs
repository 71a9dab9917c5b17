//! Trust-region dogleg for square nonlinear systems `F(x) = 0`.
//!
//! The merit function is `½‖F‖²`, the Jacobian is a forward-difference
//! approximation, and each step blends the steepest-descent (Cauchy) point
//! with the Gauss–Newton point inside the current trust region. The
//! Gauss–Newton point is the minimum-norm least-squares step, so systems with
//! a rank-deficient Jacobian (e.g. a scale-free direction) are handled; the
//! pure Cauchy step is used when that solve fails.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_norm_solve;

/// Default relative forward-difference step.
pub const FD_STEP: f64 = 1e-6;
const SVD_CUTOFF: f64 = 1e-10;
const ACCEPT_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoglegOptions {
    /// Convergence when `‖F(x)‖₂ <= tol`.
    pub tol: f64,
    pub max_iters: usize,
    /// Initial trust-region radius.
    pub trust_radius: f64,
    /// Forward-difference step is `fd_step * (1 + |x_k|)`.
    pub fd_step: f64,
}

impl Default for DoglegOptions {
    fn default() -> Self {
        DoglegOptions { tol: 1e-8, max_iters: 200, trust_radius: 1.0, fd_step: FD_STEP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootReport {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Merit `½‖F‖²` after each accepted step, starting with `x0`.
    pub merit_history: Vec<f64>,
}

fn norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

/// Forward-difference Jacobian with step `rel_step (1 + |x_k|)`.
pub fn fd_jacobian<F>(
    f: &mut F,
    x: &DVector<f64>,
    fx: &DVector<f64>,
    rel_step: f64,
    evaluations: &mut usize,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let m = fx.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for k in 0..n {
        let step = rel_step * (1.0 + x[k].abs());
        xp[k] = x[k] + step;
        let actual = xp[k] - x[k];
        let fp = f(xp.as_slice())?;
        *evaluations += 1;
        for r in 0..m {
            jac[(r, k)] = (fp[r] - fx[r]) / actual;
        }
        xp[k] = x[k];
    }
    Ok(jac)
}

/// Dogleg step for the model `½‖f + J p‖²` within radius `delta`.
fn dogleg_step(jac: &DMatrix<f64>, fx: &DVector<f64>, delta: f64) -> DVector<f64> {
    let g = jac.transpose() * fx;
    let gnorm = norm(&g);
    let jg = jac * &g;
    let jg2 = jg.norm_squared();
    let cauchy = if jg2 > 0.0 { -(gnorm * gnorm / jg2) * &g } else { -&g * (delta / gnorm.max(f64::MIN_POSITIVE)) };

    let newton = min_norm_solve(jac, &(-fx), SVD_CUTOFF)
        .map(|(p, _)| p)
        .filter(|p| p.iter().all(|v| v.is_finite()));
    let Some(newton) = newton else {
        let c = norm(&cauchy);
        return if c > delta { cauchy * (delta / c) } else { cauchy };
    };
    if norm(&newton) <= delta {
        return newton;
    }
    let cn = norm(&cauchy);
    if cn >= delta {
        return cauchy * (delta / cn);
    }
    // p = c + t (n - c) with |p| = delta, t in [0, 1]
    let diff = &newton - &cauchy;
    let a = diff.norm_squared();
    let b = 2.0 * cauchy.dot(&diff);
    let c = cauchy.norm_squared() - delta * delta;
    let t = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    cauchy + diff * t.clamp(0.0, 1.0)
}

pub fn solve_dogleg<F>(mut f: F, x0: &[f64], opts: &DoglegOptions) -> Result<RootReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = DVector::from_column_slice(x0);
    let f0 = f(x0)?;
    let mut evaluations = 1;
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("F(x0) is not finite".into()));
    }
    let mut fx = DVector::from_vec(f0);
    let mut merit = 0.5 * fx.norm_squared();
    let mut merit_history = vec![merit];
    let mut delta = opts.trust_radius.max(f64::MIN_POSITIVE);
    let mut iterations = 0;
    let mut jac = fd_jacobian(&mut f, &x, &fx, opts.fd_step, &mut evaluations)?;

    while norm(&fx) > opts.tol && iterations < opts.max_iters {
        iterations += 1;
        let step = dogleg_step(&jac, &fx, delta);
        let step_norm = norm(&step);
        if !(step_norm > 0.0) || step_norm <= f64::EPSILON * (1.0 + norm(&x)) {
            break;
        }
        let predicted = merit - 0.5 * (&fx + &jac * &step).norm_squared();
        let trial = &x + &step;
        let ft = f(trial.as_slice());
        evaluations += 1;
        let (ratio, ft) = match ft {
            Ok(v) if v.iter().all(|e| e.is_finite()) => {
                let ft = DVector::from_vec(v);
                let actual = merit - 0.5 * ft.norm_squared();
                let ratio = if predicted > 0.0 { actual / predicted } else if actual > 0.0 { 1.0 } else { -1.0 };
                (ratio, Some(ft))
            }
            _ => (-1.0, None),
        };
        if ratio < 0.25 {
            delta = 0.25 * step_norm;
        } else if ratio > 0.75 && step_norm >= 0.99 * delta {
            delta = (2.0 * delta).max(2.0 * step_norm);
        }
        match ft {
            Some(ft) if ratio > ACCEPT_RATIO => {
                x = trial;
                fx = ft;
                merit = 0.5 * fx.norm_squared();
                merit_history.push(merit);
                if norm(&fx) <= opts.tol {
                    break;
                }
                jac = fd_jacobian(&mut f, &x, &fx, opts.fd_step, &mut evaluations)?;
            }
            _ => {
                if delta <= 1e-15 * (1.0 + norm(&x)) {
                    break;
                }
            }
        }
    }
    let residual_norm = norm(&fx);
    Ok(RootReport {
        x: x.iter().copied().collect(),
        residual_norm,
        iterations,
        evaluations,
        converged: residual_norm <= opts.tol,
        merit_history,
    })
}
