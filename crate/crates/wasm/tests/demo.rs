use sgee_wasm::{correlation_json, simulate_and_fit_json, smooth_json};

fn parse(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn fit_returns_curves_and_estimates() {
    let v = parse(&simulate_and_fit_json(30, 12, 0.9, 0.4, 2.0, 1).unwrap());
    assert_eq!(v["sgee"].as_array().unwrap().len(), 5);
    assert_eq!(v["link"]["x"].as_array().unwrap().len(), 201);
    assert_eq!(v["variance"]["estimated"].as_array().unwrap().len(), 121);
}

#[test]
fn smoother_tracks_noiseless_curve() {
    let v = parse(&smooth_json(81, 0.0, 0.5, false, 3).unwrap());
    let est = v["curve"]["estimated"].as_array().unwrap();
    let truth = v["curve"]["truth"].as_array().unwrap();
    let mid = est.len() / 2;
    assert!((est[mid].as_f64().unwrap() - truth[mid].as_f64().unwrap()).abs() < 0.05);
    assert!(smooth_json(2, 0.1, 0.5, false, 3).is_err());
}

#[test]
fn correlation_matrix_is_symmetric_with_unit_diagonal() {
    let v = parse(&correlation_json(0.85, 0.9, &[0.0, 1.0, 3.0]).unwrap());
    let m = v["matrix"].as_array().unwrap();
    assert_eq!(m[0][0].as_f64().unwrap(), 1.0);
    assert!((m[0][1].as_f64().unwrap() - 0.765).abs() < 1e-12);
    assert_eq!(m[1][2], m[2][1]);
    assert!(correlation_json(1.0, 1.5, &[0.0, 1.0]).is_err());
}
