//! Derivative-free minimization (Nelder–Mead simplex).

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Simplex diameter tolerance, measured with the caller's distance.
    pub xtol: f64,
    /// Spread of objective values, relative to `max(1, |f_best|)`.
    pub ftol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_iters: 5000, xtol: 1e-8, ftol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from an axis-aligned initial simplex with per-coordinate
/// `steps`. `distance` measures vertex separation for the convergence test,
/// which lets callers ignore directions the objective is flat in.
pub fn nelder_mead<F, D>(mut f: F, x0: &[f64], steps: &[f64], opts: &NelderMeadOptions, distance: D) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
    D: Fn(&[f64], &[f64]) -> f64,
{
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evaluations);
    simplex.push((x0.to_vec(), f0));
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += steps[k];
        let fv = eval(&v, &mut evaluations);
        simplex.push((v, fv));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let spread = simplex.iter().map(|v| (v.1 - best).abs()).fold(0.0, f64::max);
        let diameter = simplex.iter().map(|v| distance(&v.0, &simplex[0].0)).fold(0.0, f64::max);
        if diameter <= opts.xtol && spread <= opts.ftol * best.abs().max(1.0) {
            converged = true;
            break;
        }
        iterations += 1;

        let worst = simplex[n].clone();
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v.0[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (worst.0[k] - centroid[k])).collect() };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut evaluations);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evaluations);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let best_x = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = (0..n).map(|k| best_x[k] + 0.5 * (v.0[k] - best_x[k])).collect();
            let fx = eval(&x, &mut evaluations);
            *v = (x, fx);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    NelderMeadResult { x, f, iterations, evaluations, converged }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(rosen, &[-1.2, 1.0], &[0.1, 0.1], &NelderMeadOptions::default(), euclidean);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reports_non_convergence() {
        let opts = NelderMeadOptions { max_iters: 3, ..Default::default() };
        let r = nelder_mead(|x: &[f64]| x[0] * x[0], &[5.0], &[1.0], &opts, euclidean);
        assert!(!r.converged);
        assert!(r.f <= 25.0);
    }
}
