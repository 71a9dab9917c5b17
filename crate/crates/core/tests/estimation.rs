use nalgebra::DMatrix;
use sgee_core::covariance::CorrelationKind;
use sgee_core::data::{LongitudinalDataset, ModelParameters};
use sgee_core::kernel::KernelSpec;
use sgee_core::montecarlo::{generate_dataset, SimConfig};
use sgee_core::pipeline::{fit_pipeline, PipelineConfig};
use sgee_core::puls::{fit_puls, puls_objective, PulsOptions};
use sgee_core::sgee::{fit_sgee, gee_residual, identity_weights, SgeeOptions};

const H: f64 = 0.35;

fn noiseless(n: usize, rep: u64) -> (LongitudinalDataset, ModelParameters) {
    let cfg = SimConfig { n, variance_scale: 0.0, ..Default::default() };
    (generate_dataset(&cfg, rep).unwrap(), cfg.truth().unwrap())
}

fn sup_dist(a: &ModelParameters, b: &ModelParameters) -> f64 {
    a.stacked().iter().zip(b.stacked()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn reversed(ds: &LongitudinalDataset) -> LongitudinalDataset {
    LongitudinalDataset::new(ds.subjects.iter().rev().cloned().collect()).unwrap()
}

#[test]
fn puls_recovers_noiseless_truth_from_perturbed_start() {
    let (ds, truth) = noiseless(50, 0);
    let start: Vec<f64> = truth.stacked().iter().map(|v| v + 0.1).collect();
    let init = ModelParameters::from_stacked(&start, 2).unwrap();
    let fit = fit_puls(&ds, H, &KernelSpec::epanechnikov(), &init, &PulsOptions::default()).unwrap();
    assert!(fit.converged);
    // without noise the only error left is the O(h^2) smoothing bias
    assert!(sup_dist(&fit.params, &truth) < 1e-3, "{:?}", fit.params);
}

#[test]
fn estimating_function_vanishes_at_truth_without_noise_and_is_linear_in_weights() {
    let (ds, truth) = noiseless(30, 1);
    let spec = KernelSpec::epanechnikov();
    let w = identity_weights(&ds);
    let g = gee_residual(&ds, &truth, &w, H, &spec).unwrap();
    assert_eq!(g.len(), 5);
    // residuals are the smoothing bias of a noiseless exponential link, so G
    // is small rather than zero; at a linear link it vanishes exactly
    let off = ModelParameters::new(vec![2.1, 0.9], truth.theta.clone()).unwrap();
    let g1 = gee_residual(&ds, &off, &w, H, &spec).unwrap();
    let w2: Vec<DMatrix<f64>> = w.iter().map(|m| m * 2.0).collect();
    let g2 = gee_residual(&ds, &off, &w2, H, &spec).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }

    let mut lin = ds.clone();
    for s in &mut lin.subjects {
        let u = s.index(&truth.theta);
        let zb = s.linear_part(&truth.beta);
        for j in 0..s.len() {
            s.y[j] = zb[j] + 1.0 - 0.5 * u[j];
        }
    }
    let g = gee_residual(&lin, &truth, &w, H, &spec).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
}

#[test]
fn sgee_with_identity_weights_keeps_noiseless_root() {
    let (ds, truth) = noiseless(50, 2);
    let spec = KernelSpec::epanechnikov();
    let w = identity_weights(&ds);
    // the noiseless root differs from the truth only by smoothing bias
    let puls = fit_puls(&ds, H, &spec, &truth, &PulsOptions::default()).unwrap();
    let fit = fit_sgee(&ds, H, &spec, &w, &truth, &SgeeOptions::default()).unwrap();
    assert!(fit.converged && fit.residual_norm < 1e-8);
    assert!(sup_dist(&fit.params, &truth) < 1e-3);
    assert!(sup_dist(&fit.params, &puls.params) < 1e-3);
    assert_eq!(fit.link.grid.len(), 201);
    assert_eq!(fit.std_errors.len(), 5);
}

#[test]
fn sgee_direction_does_not_depend_on_init_scale() {
    let (ds, truth) = noiseless(30, 3);
    let spec = KernelSpec::epanechnikov();
    let w = identity_weights(&ds);
    let opts = SgeeOptions { link_grid_points: 0, std_errors: false, ..Default::default() };
    let v = vec![0.7, 0.3, 0.6];
    let a = fit_sgee(&ds, H, &spec, &w, &ModelParameters { beta: truth.beta.clone(), theta: v.clone() }, &opts).unwrap();
    let scaled: Vec<f64> = v.iter().map(|x| 5.0 * x).collect();
    let b = fit_sgee(&ds, H, &spec, &w, &ModelParameters { beta: truth.beta.clone(), theta: scaled }, &opts).unwrap();
    assert!(sup_dist(&a.params, &b.params) < 1e-12, "{:?} vs {:?}", a.params, b.params);
}

#[test]
fn subject_order_does_not_change_fits() {
    let cfg = SimConfig { n: 30, ..Default::default() };
    let ds = generate_dataset(&cfg, 4).unwrap();
    let rev = reversed(&ds);
    let truth = cfg.truth().unwrap();
    let spec = KernelSpec::epanechnikov();
    let o1 = puls_objective(&ds, &truth, H, &spec).unwrap().value;
    let o2 = puls_objective(&rev, &truth, H, &spec).unwrap().value;
    assert_eq!(o1, o2);

    let pc = PipelineConfig::new(H, 2.0, CorrelationKind::Ar1);
    let a = fit_pipeline(&ds, &pc).unwrap();
    let b = fit_pipeline(&rev, &pc).unwrap();
    // the objectives agree exactly; Nelder–Mead paths differ only in rounding
    assert!(sup_dist(&a.puls.params, &b.puls.params) < 1e-6);
    let (x, y) = (a.sgee.params.stacked(), b.sgee.params.stacked());
    assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-8), "{x:?} vs {y:?}");
    let (p, q) = (&a.covariance.phi.family.phi, &b.covariance.phi.family.phi);
    assert!(p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-8), "{p:?} vs {q:?}");
}

#[test]
fn pipeline_on_correlated_data_converges_and_improves_on_start() {
    let cfg = SimConfig { n: 50, ..Default::default() };
    let ds = generate_dataset(&cfg, 5).unwrap();
    let fit = fit_pipeline(&ds, &PipelineConfig::new(H, 2.0, CorrelationKind::Ar1)).unwrap();
    assert!(fit.puls.converged && fit.sgee.converged);
    let truth = cfg.truth().unwrap();
    assert!(sup_dist(&fit.sgee.params, &truth) < 0.15);
    assert!(fit.sgee.std_errors.iter().all(|s| *s > 0.0 && *s < 0.2));
    let theta_norm: f64 = fit.sgee.params.theta.iter().map(|v| v * v).sum::<f64>();
    assert!((theta_norm - 1.0).abs() < 1e-12);
}
