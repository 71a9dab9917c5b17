use rand::Rng;
use rand_distr::StandardNormal;
use sgee_core::covariance::{estimate_variance_function, residual_squares, variance_at};
use sgee_core::kernel::KernelSpec;
use sgee_core::montecarlo::{generate_dataset, rep_rng, SimConfig};
use sgee_core::puls::{fit_puls, PulsOptions};

/// Composite Simpson rule on [a, b] with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn scale_correction_matches_gaussian_log_moment() {
    // r = sigma2 * xi^2 with xi ~ N(0, 1) and constant sigma2: the log curve
    // is flat at E log(r + zeta), so tau = exp(E log(r + zeta)) / sigma2.
    let (n, m, sigma2) = (400usize, 10usize, 0.5);
    let mut rng = rep_rng(11, 0);
    let times: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|j| j as f64 + rng.random::<f64>()).collect()).collect();
    let r_hat: Vec<Vec<f64>> =
        (0..n).map(|_| (0..m).map(|_| sigma2 * rng.sample::<f64, _>(StandardNormal).powi(2)).collect()).collect();
    let zeta = 1.0 / (n * m) as f64;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let elog = simpson(|z| (sigma2 * z * z + zeta).ln() * phi(z), -12.0, 12.0, 400_000);
    let tau_oracle = elog.exp() / sigma2;
    // without the shift this is exp(-gamma - ln 2) = 0.2807
    assert!((tau_oracle - 0.2807).abs() < 0.02);

    let vfe = estimate_variance_function(&times, &r_hat, 3.0, &KernelSpec::epanechnikov()).unwrap();
    assert!((vfe.tau_hat / tau_oracle - 1.0).abs() < 0.12, "tau {} vs {tau_oracle}", vfe.tau_hat);
    for t in [1.0, 5.0, 9.0] {
        let (v, outside) = variance_at(&vfe, t);
        assert!(!outside);
        assert!((v / sigma2 - 1.0).abs() < 0.25, "sigma2_hat({t}) = {v}");
    }
}

#[test]
fn squared_residuals_average_to_the_error_variance() {
    let cfg = SimConfig { n: 100, variance_scale: 0.3, variance_timescale: 1e12, ..Default::default() };
    let ds = generate_dataset(&cfg, 0).unwrap();
    let spec = KernelSpec::epanechnikov();
    let fit = fit_puls(&ds, 0.3, &spec, &cfg.truth().unwrap(), &PulsOptions::default()).unwrap();
    let r = residual_squares(&ds, &fit, 0.3, &spec).unwrap();
    let all: Vec<f64> = r.into_iter().flatten().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    // correlated draws: allow a wide band around 0.3
    assert!((mean - 0.3).abs() < 0.06, "mean r = {mean}");
}

#[test]
fn design_variance_is_recovered_on_average() {
    let cfg = SimConfig::default();
    let spec = KernelSpec::epanechnikov();
    let mut at_zero = Vec::new();
    for rep in 0..8 {
        let ds = generate_dataset(&cfg, rep).unwrap();
        let fit = fit_puls(&ds, 0.3, &spec, &cfg.truth().unwrap(), &PulsOptions::default()).unwrap();
        let r = residual_squares(&ds, &fit, 0.3, &spec).unwrap();
        let times: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.times.clone()).collect();
        let vfe = estimate_variance_function(&times, &r, 2.0, &spec).unwrap();
        at_zero.push(variance_at(&vfe, 1.0).0 / cfg.variance(1.0));
    }
    at_zero.sort_by(f64::total_cmp);
    let med = 0.5 * (at_zero[3] + at_zero[4]);
    assert!((0.6..1.5).contains(&med), "{at_zero:?}");
}
