mod config;
mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sgee_core::bandwidth::{
    cv_link_bandwidth, cv_variance_bandwidth, default_grid, default_variance_grid, CvOptions, CvResult,
};
use sgee_core::covariance::{residual_squares, variance_at, CorrelationKind};
use sgee_core::data::{load_csv_standard, save_csv, validate, LongitudinalDataset};
use sgee_core::kernel::{uniform_grid, KernelKind, KernelSpec};
use sgee_core::montecarlo::{generate_dataset, run_study, write_summary_csv, SimConfig};
use sgee_core::pipeline::{estimate_covariance, run_puls, PipelineConfig};
use sgee_core::puls::profile_residuals;
use sgee_core::sgee::{estimate_link, fit_sgee, identity_weights, sgee_sandwich};
use sgee_core::Error;

use report::{link_svg, markdown_table, Bandwidths, Diagnostics, FitReport, SummaryRow, VarianceCurve};

/// Points in the reported variance-function grid.
const VARIANCE_REPORT_POINTS: usize = 101;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable input (exit 2).
    Input(String),
    /// An estimator or study failed to converge (exit 3).
    Convergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Convergence(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Convergence(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::StudyFailure(_) => CliError::Convergence(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "sgee", version, about = "Semiparametric GEE for partially linear single-index longitudinal models")]
struct Cli {
    /// Overrides the RNG seed of simulation configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets from the simulation design.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; with several replications `_001`, `_002`, .. are
        /// appended to the file stem.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `reps` from the config.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Cross-validate a bandwidth; prints `h,score` rows.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "link")]
        target: CvTarget,
        /// `auto` or a comma-separated list of bandwidths.
        #[arg(long, default_value = "auto")]
        grid: String,
        /// Link bandwidth for the residuals (variance target only).
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, value_enum, default_value = "epanechnikov")]
        kernel: KernelArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a dataset and print a JSON report.
    Fit(FitArgs),
    /// Run a Monte Carlo study and write the Bias/SD/MAD table as CSV.
    McStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-replication records as JSON.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Render a study table as markdown, or a fitted link as SVG.
    Report {
        /// Study table CSV, fit report JSON, or link CSV with columns `u,eta`.
        #[arg(long)]
        input: PathBuf,
        /// `.svg` for a link plot, anything else for a markdown table.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CvTarget {
    Link,
    Variance,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Epanechnikov,
    Gaussian,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Epanechnikov => KernelKind::Epanechnikov,
            KernelArg::Gaussian => KernelKind::Gaussian,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Puls,
    Sgee,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorrArg {
    Indep,
    Ar1,
    Arma11,
}

impl From<CorrArg> for CorrelationKind {
    fn from(c: CorrArg) -> Self {
        match c {
            CorrArg::Indep => CorrelationKind::Indep,
            CorrArg::Ar1 => CorrelationKind::Ar1,
            CorrArg::Arma11 => CorrelationKind::Arma11,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "sgee")]
    method: Method,
    /// Link bandwidth; required unless `--cv` is given.
    #[arg(long)]
    h: Option<f64>,
    /// Choose the link bandwidth by leave-one-subject-out CV.
    #[arg(long)]
    cv: bool,
    /// Variance bandwidth; chosen by CV when absent.
    #[arg(long)]
    h1: Option<f64>,
    #[arg(long, value_enum, default_value = "ar1")]
    corr: CorrArg,
    /// Rounds of covariance estimation and SGEE.
    #[arg(long, default_value_t = 1)]
    iterate: usize,
    #[arg(long, value_enum, default_value = "epanechnikov")]
    kernel: KernelArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also plot the fitted link against 0.5 exp(u) as SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, out, reps } => cmd_simulate(&config, &out, reps, cli.seed),
        Command::Cv { data, target, grid, h, kernel, out } => cmd_cv(&data, target, &grid, h, kernel, out.as_deref()),
        Command::Fit(args) => cmd_fit(&args),
        Command::McStudy { config, out, records } => cmd_mc_study(&config, &out, records.as_deref(), cli.seed),
        Command::Report { input, out } => cmd_report(&input, &out),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn numbered_path(base: &Path, k: usize) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let ext = base.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    base.with_file_name(format!("{stem}_{k:03}.{ext}"))
}

fn cmd_simulate(config: &Path, out: &Path, reps: Option<usize>, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = config::load_study_config(config)?.sim;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let reps = reps.unwrap_or(cfg.reps);
    if reps == 0 {
        return Err(CliError::Input("reps must be at least 1".into()));
    }
    for r in 0..reps {
        let ds = generate_dataset(&cfg, r as u64)?;
        let path = if reps == 1 { out.to_path_buf() } else { numbered_path(out, r + 1) };
        save_csv(&ds, &path)?;
        log::info!("wrote {} ({} subjects, {} observations)", path.display(), ds.n(), ds.total_obs());
    }
    Ok(())
}

fn load_data(path: &Path) -> CliResult<LongitudinalDataset> {
    if !path.exists() {
        return Err(CliError::Input(format!("{}: no such file", path.display())));
    }
    let ds = load_csv_standard(path)?;
    let report = validate(&ds);
    for note in &report.notes {
        log::warn!("{note}");
    }
    if !report.is_valid() {
        let msgs: Vec<String> = report.violations.iter().map(|v| format!("{v:?}")).collect();
        return Err(CliError::Input(format!("invalid dataset: {}", msgs.join("; "))));
    }
    Ok(ds)
}

fn parse_grid(grid: &str) -> CliResult<Option<Vec<f64>>> {
    if grid == "auto" {
        return Ok(None);
    }
    grid.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Input(format!("bad grid value '{s}'"))))
        .collect::<CliResult<Vec<_>>>()
        .map(Some)
}

fn variance_cv(ds: &LongitudinalDataset, h: f64, spec: &KernelSpec, grid: Option<Vec<f64>>) -> CliResult<CvResult> {
    let cfg = PipelineConfig { kernel: *spec, ..PipelineConfig::new(h, 1.0, CorrelationKind::Indep) };
    let puls = run_puls(ds, &cfg)?;
    let r_hat = residual_squares(ds, &puls, h, spec)?;
    let times: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.times.clone()).collect();
    let grid = match grid {
        Some(g) => g,
        None => default_variance_grid(ds)?,
    };
    Ok(cv_variance_bandwidth(&times, &r_hat, &grid, spec)?)
}

fn cmd_cv(data: &Path, target: CvTarget, grid: &str, h: Option<f64>, kernel: KernelArg, out: Option<&Path>) -> CliResult<()> {
    let ds = load_data(data)?;
    let spec = KernelSpec::from_kind(kernel.into());
    let grid = parse_grid(grid)?;
    let result = match target {
        CvTarget::Link => {
            let grid = match grid {
                Some(g) => g,
                None => default_grid(&ds)?,
            };
            cv_link_bandwidth(&ds, &grid, &spec, &CvOptions::default())?
        }
        CvTarget::Variance => {
            let h = h.ok_or_else(|| CliError::Input("--target variance needs --h".into()))?;
            variance_cv(&ds, h, &spec, grid)?
        }
    };
    let mut text = String::from("h,score\n");
    for (h, s) in result.grid.iter().zip(&result.scores) {
        text.push_str(&format!("{h},{s}\n"));
    }
    write_output(out, &text)?;
    eprintln!("best h = {}", result.best);
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let started = Instant::now();
    if args.iterate == 0 {
        return Err(CliError::Input("--iterate must be at least 1".into()));
    }
    let ds = load_data(&args.data)?;
    let spec = KernelSpec::from_kind(args.kernel.into());
    let (h, h_source) = match (args.h, args.cv) {
        (Some(h), _) if h > 0.0 && h.is_finite() => (h, "given"),
        (Some(h), _) => return Err(CliError::Input(format!("--h must be positive, got {h}"))),
        (None, true) => (cv_link_bandwidth(&ds, &default_grid(&ds)?, &spec, &CvOptions::default())?.best, "cv"),
        (None, false) => return Err(CliError::Input("either --h or --cv is required".into())),
    };
    let mut cfg = PipelineConfig::new(h, 1.0, args.corr.into());
    cfg.kernel = spec;
    cfg.iterate = args.iterate;
    let mut warnings = Vec::new();

    let puls = run_puls(&ds, &cfg)?;
    if !puls.converged {
        warnings.push("PULS did not converge".to_string());
    }
    let mut report = FitReport {
        method: "puls".into(),
        params: puls.params.clone(),
        std_errors: Vec::new(),
        tau_hat: None,
        corr: None,
        phi_hat: None,
        kernel: spec.kind,
        iterate: args.iterate,
        bandwidths: Bandwidths { h, h1: None, h_source: h_source.into(), h1_source: None },
        link: sgee_core::kernel::LinkEstimate { grid: Vec::new(), eta: Vec::new(), eta_dot: Vec::new() },
        variance: None,
        diagnostics: Diagnostics {
            converged: puls.converged,
            puls_converged: puls.converged,
            puls_iterations: puls.iterations,
            puls_objective: puls.objective,
            sgee_converged: None,
            sgee_iterations: None,
            residual_norm: None,
            warnings: Vec::new(),
        },
        n_subjects: ds.n(),
        n_observations: ds.total_obs(),
        seconds: 0.0,
    };

    let final_params = if args.method == Method::Puls {
        report.std_errors = sgee_sandwich(&ds, &puls.params, &identity_weights(&ds), h, &spec)?.se;
        puls.params.clone()
    } else {
        let (h1, h1_source) = match args.h1 {
            Some(h1) if h1 > 0.0 && h1.is_finite() => (h1, "given"),
            Some(h1) => return Err(CliError::Input(format!("--h1 must be positive, got {h1}"))),
            None => {
                let resid = profile_residuals(&ds, &puls.params, h, &spec)?;
                let r_hat: Vec<Vec<f64>> = resid.iter().map(|r| r.iter().map(|e| e * e).collect()).collect();
                let times: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.times.clone()).collect();
                (cv_variance_bandwidth(&times, &r_hat, &default_variance_grid(&ds)?, &spec)?.best, "cv")
            }
        };
        cfg.h1 = h1;
        report.bandwidths.h1 = Some(h1);
        report.bandwidths.h1_source = Some(h1_source.into());
        let mut cov = estimate_covariance(&ds, &puls.params, &cfg)?;
        let mut sgee = fit_sgee(&ds, h, &spec, &cov.weights, &puls.params, &cfg.sgee)?;
        for _ in 1..cfg.iterate {
            cov = estimate_covariance(&ds, &sgee.params, &cfg)?;
            sgee = fit_sgee(&ds, h, &spec, &cov.weights, &sgee.params, &cfg.sgee)?;
        }
        if !sgee.converged {
            warnings.push(format!("SGEE did not converge (|G| = {:.3e})", sgee.residual_norm));
        }
        let (t0, t1) = ds
            .subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
        let t = uniform_grid(t0, t1, VARIANCE_REPORT_POINTS);
        let sigma2 = t.iter().map(|&t| variance_at(&cov.variance, t).0).collect();
        report.method = "sgee".into();
        report.params = sgee.params.clone();
        report.std_errors = sgee.std_errors.clone();
        report.tau_hat = Some(cov.variance.tau_hat);
        report.corr = Some(cfg.corr);
        report.phi_hat = Some(cov.phi.family.phi.clone());
        report.variance = Some(VarianceCurve { t, sigma2 });
        report.link = sgee.link.clone();
        report.diagnostics.converged = puls.converged && sgee.converged;
        report.diagnostics.sgee_converged = Some(sgee.converged);
        report.diagnostics.sgee_iterations = Some(sgee.iterations);
        report.diagnostics.residual_norm = Some(sgee.residual_norm);
        sgee.params
    };
    if report.link.grid.is_empty() {
        let idx = ds.pooled_index(&final_params.theta);
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| (a.min(u), b.max(u)));
        report.link = estimate_link(&ds, &final_params, h, &spec, &uniform_grid(lo, hi, cfg.sgee.link_grid_points))?;
    }
    report.diagnostics.warnings = warnings;
    report.seconds = started.elapsed().as_secs_f64();

    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Input(e.to_string()))? + "\n";
    write_output(args.out.as_deref(), &json)?;
    if let Some(plot) = &args.plot {
        let svg = link_svg(&report.link.grid, &report.link.eta, &SimConfig::link, "Estimated and true link");
        std::fs::write(plot, svg)?;
    }
    if !report.diagnostics.converged {
        return Err(CliError::Convergence(format!(
            "{} did not converge; the report is flagged converged = false",
            report.method
        )));
    }
    Ok(())
}

fn cmd_mc_study(config: &Path, out: &Path, records: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = config::load_study_config(config)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let study = run_study(&cfg)?;
    let (d, p) = (cfg.sim.beta0.len(), cfg.sim.theta0.len());
    let file = std::fs::File::create(out).map_err(|e| CliError::Input(format!("cannot write {}: {e}", out.display())))?;
    write_summary_csv(&study, d, p, std::io::BufWriter::new(file))?;
    if let Some(path) = records {
        let json = serde_json::to_string_pretty(&study).map_err(|e| CliError::Input(e.to_string()))?;
        std::fs::write(path, json)?;
    }
    eprintln!("h = {:.4}; {} replications", study.h, study.records.len());
    for (est, s) in &study.summaries {
        eprintln!("{}: {} used, {} excluded", est.label(), s.used, s.excluded);
    }
    Ok(())
}

fn read_summary_rows(path: &Path) -> CliResult<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    rdr.deserialize::<SummaryRow>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(serde::Deserialize)]
struct LinkRow {
    u: f64,
    eta: f64,
}

fn read_link(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let text = std::fs::read_to_string(path)?;
        let report: FitReport =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        return Ok((report.link.grid, report.link.eta));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let rows = rdr
        .deserialize::<LinkRow>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(rows.into_iter().map(|r| (r.u, r.eta)).unzip())
}

fn cmd_report(input: &Path, out: &Path) -> CliResult<()> {
    if !input.exists() {
        return Err(CliError::Input(format!("{}: no such file", input.display())));
    }
    if out.extension().is_some_and(|e| e == "svg") {
        let (u, eta) = read_link(input)?;
        if u.len() < 2 {
            return Err(CliError::Input(format!("{}: no link grid to plot", input.display())));
        }
        std::fs::write(out, link_svg(&u, &eta, &SimConfig::link, "Estimated and true link"))?;
    } else {
        let rows = read_summary_rows(input)?;
        if rows.is_empty() {
            return Err(CliError::Input(format!("{}: empty study table", input.display())));
        }
        std::fs::write(out, markdown_table(&rows))?;
    }
    Ok(())
}
