use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use sgee_core::covariance::CorrelationKind;
use sgee_core::data::ModelParameters;
use sgee_core::kernel::{KernelKind, LinkEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h: f64,
    pub h1: Option<f64>,
    /// How each bandwidth was chosen: "given" or "cv".
    pub h_source: String,
    pub h1_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub puls_converged: bool,
    pub puls_iterations: usize,
    pub puls_objective: f64,
    pub sgee_converged: Option<bool>,
    pub sgee_iterations: Option<usize>,
    pub residual_norm: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub t: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// Machine-readable output of `sgee fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub params: ModelParameters,
    pub std_errors: Vec<f64>,
    pub tau_hat: Option<f64>,
    pub corr: Option<CorrelationKind>,
    pub phi_hat: Option<Vec<f64>>,
    pub kernel: KernelKind,
    pub iterate: usize,
    pub bandwidths: Bandwidths,
    pub link: LinkEstimate,
    pub variance: Option<VarianceCurve>,
    pub diagnostics: Diagnostics,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub seconds: f64,
}

/// One row of a Monte Carlo summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub method: String,
    pub bias: f64,
    pub sd: f64,
    pub mad: f64,
}

pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from("| Parameter | Method | Bias | SD | MAD |\n|---|---|---:|---:|---:|\n");
    let mut last = "";
    for r in rows {
        let name = if r.parameter == last { "" } else { r.parameter.as_str() };
        last = &r.parameter;
        let _ = writeln!(out, "| {name} | {} | {:.4} | {:.4} | {:.4} |", r.method, r.bias, r.sd, r.mad);
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    // round to the step's decimal precision so labels print cleanly
    let digits = (-step.log10().floor()).max(0.0) as i32;
    let scale = 10f64.powi(digits);
    (first..=last).map(|k| (k as f64 * step * scale).round() / scale).collect()
}

/// Estimated link (dot-dashed) against a reference curve (solid).
pub fn link_svg(u: &[f64], estimated: &[f64], truth: &dyn Fn(f64) -> f64, title: &str) -> String {
    let reference: Vec<f64> = u.iter().map(|&x| truth(x)).collect();
    let (x0, x1) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (y0, y1) = estimated
        .iter()
        .chain(&reference)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = 0.05 * (y1 - y0).max(1e-9);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-12) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let path = |ys: &[f64]| {
        u.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect::<Vec<_>>().join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for t in nice_ticks(x0, x1) {
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y}" x2="{x:.2}" y2="{y2}" stroke="black"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{t}</text>"#,
            x = sx(t),
            y = H - MARGIN,
            y2 = H - MARGIN + 5.0,
            ty = H - MARGIN + 18.0
        );
    }
    for t in nice_ticks(y0, y1) {
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y:.2}" x2="{x2}" y2="{y:.2}" stroke="black"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{t}</text>"#,
            x = MARGIN - 5.0,
            x2 = MARGIN,
            y = sy(t),
            tx = MARGIN - 8.0,
            ty = sy(t) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">u</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<polyline id="true" fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#, path(&reference));
    let _ = writeln!(
        s,
        r#"<polyline id="estimated" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="8 3 2 3" points="{}"/>"#,
        path(estimated)
    );
    let lx = MARGIN + 12.0;
    let _ = writeln!(
        s,
        r#"<line x1="{lx}" y1="{a}" x2="{b}" y2="{a}" stroke="black" stroke-dasharray="8 3 2 3"/><text x="{c}" y="{d}">Estimated link function (dot-dashed line)</text>"#,
        a = MARGIN + 16.0,
        b = lx + 30.0,
        c = lx + 36.0,
        d = MARGIN + 20.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{lx}" y1="{a}" x2="{b}" y2="{a}" stroke="black"/><text x="{c}" y="{d}">True link function (solid line)</text>"#,
        a = MARGIN + 34.0,
        b = lx + 30.0,
        c = lx + 36.0,
        d = MARGIN + 38.0
    );
    s.push_str("</svg>\n");
    s
}
