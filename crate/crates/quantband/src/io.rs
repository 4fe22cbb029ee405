//! CSV ingestion (plain, auxiliary, and repeated-measurement layouts),
//! artifact emission (band CSV, JSON summary, SVG slices), and the
//! command bodies behind the CLI.

use crate::bands::{bootstrap_thetas, build_bands, BootstrapConfig, UniformBand};
use crate::bandwidth::{select_plan, BandwidthPlan, Provenance, TuningParams};
use crate::deconv::{DeconvKernel, ErrorModel};
use crate::estimator::{fit_grid, EvalGrid, PrimarySample, QuantileGridFit};
use crate::quad::QuadratureRule;
use crate::sim::{run_study, study_csv, SimConfig, TauRegion};
use crate::variance::{sigma_hat, VarianceConfig, VarianceDiagnostics};
use crate::NumericError;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Errors surfaced to the CLI, partitioned into input problems (exit
/// code 2) and numerical failures (exit code 3).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no data rows")]
    EmptyData,
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("numerical failure: {0}")]
    Numeric(#[from] NumericError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A user-supplied known error model, parsed from `laplace:B` or
/// `gaussian:SD`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ErrorOverride {
    Laplace { scale: f64 },
    Gaussian { sd: f64 },
}

impl ErrorOverride {
    pub fn parse(spec: &str) -> CliResult<Self> {
        let (name, value) = spec.split_once(':').ok_or_else(|| CliError::Config {
            field: "error".into(),
            message: format!("expected NAME:VALUE, got `{spec}`"),
        })?;
        let value: f64 = value.parse().map_err(|_| CliError::Config {
            field: "error".into(),
            message: format!("`{value}` is not a number"),
        })?;
        if !(value.is_finite() && value > 0.0) {
            return Err(CliError::Config {
                field: "error".into(),
                message: "scale must be a positive finite number".into(),
            });
        }
        match name {
            "laplace" => Ok(ErrorOverride::Laplace { scale: value }),
            "gaussian" => Ok(ErrorOverride::Gaussian { sd: value }),
            other => Err(CliError::Config {
                field: "error".into(),
                message: format!("unknown error model `{other}`"),
            }),
        }
    }

    pub fn model(self) -> ErrorModel {
        match self {
            ErrorOverride::Laplace { scale } => ErrorModel::laplace(scale),
            ErrorOverride::Gaussian { sd } => ErrorModel::gaussian(sd),
        }
    }
}

/// Everything the `fit` command needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRequest {
    pub data_path: PathBuf,
    pub aux_path: Option<PathBuf>,
    /// Treat the data file as `y,w1,w2` repeated measurements.
    pub repeated: bool,
    /// Apply `log(. + shift)` to each measurement column first.
    pub log_shift: Option<f64>,
    pub error_override: Option<ErrorOverride>,
    pub alphas: Vec<f64>,
    pub tau_region: TauRegion,
    /// Defaults to `[min W, max W]`; an interior region is recommended
    /// because deconvolution is boundary-sensitive.
    pub x_region: Option<(f64, f64)>,
    pub nx: usize,
    pub ntau: usize,
    pub boot_reps: usize,
    pub seed: u64,
    pub tuning: TuningParams,
    /// Manual bandwidths; any that are `None` come from the selection
    /// pipeline.
    pub h_override: Option<f64>,
    pub hw_override: Option<f64>,
    pub hy_override: Option<f64>,
    pub use_simex: bool,
    /// Emit an SVG band plot for each tau slice.
    pub svg: bool,
    pub out_prefix: PathBuf,
}

fn parse_field(raw: &str, line: usize, column: &str) -> CliResult<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| CliError::Parse {
        line,
        column: column.into(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(CliError::Parse {
            line,
            column: column.into(),
            message: "non-finite value".into(),
        });
    }
    Ok(v)
}

fn read_csv(path: &Path, expected_headers: &[&[&str]]) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Schema(e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let matched = expected_headers
        .iter()
        .any(|want| headers.iter().map(String::as_str).eq(want.iter().copied()));
    if !matched {
        return Err(CliError::Schema(format!(
            "unexpected header `{}` in {}; expected one of: {}",
            headers.join(","),
            path.display(),
            expected_headers
                .iter()
                .map(|h| h.join(","))
                .collect::<Vec<_>>()
                .join(" | ")
        )));
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        // Header is line 1; data starts at line 2.
        let line = idx + 2;
        let record = record.map_err(|e| CliError::Parse {
            line,
            column: "*".into(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(CliError::Parse {
                line,
                column: "*".into(),
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(headers.len());
        for (col, raw) in headers.iter().zip(record.iter()) {
            row.push(parse_field(raw, line, col)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::EmptyData);
    }
    Ok((headers, rows))
}

/// Load the primary data and build the error model from exactly one of:
/// an auxiliary error file, repeated measurement columns, or a known
/// model override.
pub fn ingest(request: &FitRequest) -> CliResult<(PrimarySample, Vec<f64>, ErrorModel)> {
    let sources = usize::from(request.aux_path.is_some())
        + usize::from(request.repeated)
        + usize::from(request.error_override.is_some());
    if sources != 1 {
        return Err(CliError::Config {
            field: "error source".into(),
            message: "exactly one of --aux, --repeated, or --error is required".into(),
        });
    }
    let mut aux: Vec<f64> = Vec::new();
    let (w, y) = if request.repeated {
        let (_, rows) = read_csv(&request.data_path, &[&["y", "w1", "w2"]])?;
        let transform = |v: f64, line: usize, col: &str| -> CliResult<f64> {
            match request.log_shift {
                Some(shift) => {
                    let shifted = v + shift;
                    if shifted <= 0.0 {
                        Err(CliError::Parse {
                            line,
                            column: col.into(),
                            message: format!("log shift: {v} + {shift} is not positive"),
                        })
                    } else {
                        Ok(shifted.ln())
                    }
                }
                None => Ok(v),
            }
        };
        let mut w = Vec::with_capacity(rows.len());
        let mut y = Vec::with_capacity(rows.len());
        for (idx, row) in rows.iter().enumerate() {
            let line = idx + 2;
            let w1 = transform(row[1], line, "w1")?;
            let w2 = transform(row[2], line, "w2")?;
            y.push(row[0]);
            w.push(0.5 * (w1 + w2));
            aux.push(0.5 * (w1 - w2));
        }
        (w, y)
    } else {
        let (_, rows) = read_csv(&request.data_path, &[&["y", "w"]])?;
        let w = rows.iter().map(|r| r[1]).collect();
        let y = rows.iter().map(|r| r[0]).collect();
        (w, y)
    };
    if let Some(aux_path) = &request.aux_path {
        let (_, rows) = read_csv(aux_path, &[&["u"]])?;
        aux = rows.into_iter().map(|r| r[0]).collect();
    }
    let model = match request.error_override {
        Some(over) => over.model(),
        None => ErrorModel::empirical(aux.clone())?,
    };
    let sample = PrimarySample::new(w, y)?;
    Ok((sample, aux, model))
}

/// The assembled outputs of one fit.
pub struct FitOutcome {
    pub plan: BandwidthPlan,
    pub fit: QuantileGridFit,
    pub bands: UniformBand,
    pub diagnostics: VarianceDiagnostics,
    pub clamped_nodes: u64,
}

/// Run the full pipeline on ingested data.
pub fn run_fit(
    request: &FitRequest,
    sample: &PrimarySample,
    aux: &[f64],
    model: &ErrorModel,
    quad: &QuadratureRule,
) -> CliResult<FitOutcome> {
    let (x_lo, x_hi) = request.x_region.unwrap_or_else(|| {
        let lo = sample.w().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sample.w().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let grid = match request.tau_region {
        TauRegion::Singleton(t) => {
            EvalGrid::new(crate::estimator::linspace(x_lo, x_hi, request.nx), vec![t])?
        }
        TauRegion::Interval(lo, hi) => {
            EvalGrid::equispaced(x_lo, x_hi, request.nx, lo, hi, request.ntau)?
        }
    };
    let mut tuning = request.tuning.clone();
    tuning.seed = request.seed;
    let all_manual =
        request.h_override.is_some() && request.hw_override.is_some() && request.hy_override.is_some();
    let mut plan = if all_manual {
        BandwidthPlan {
            h: 0.0,
            h_opt: 0.0,
            h_w: 0.0,
            h_y: 0.0,
            b: 0.0,
            provenance: Provenance::Manual,
            undersmooth_k: 0,
            undersmooth_l: tuning.l_steps,
        }
    } else {
        select_plan(
            sample,
            aux,
            model,
            &tuning,
            request.tau_region.center(),
            &grid,
            quad,
            request.use_simex,
        )?
    };
    if let Some(h) = request.h_override {
        plan.h = h;
        plan.provenance = Provenance::Manual;
    }
    if let Some(hw) = request.hw_override {
        plan.h_w = hw;
    }
    if let Some(hy) = request.hy_override {
        plan.h_y = hy;
    }
    let mut fit = fit_grid(sample, model, plan.h, &grid, quad)?;
    let diagnostics = sigma_hat(
        sample,
        model,
        &mut fit,
        &VarianceConfig::new(plan.h_w, plan.h_y),
        quad,
    )?;
    let boot_cfg = BootstrapConfig::new(request.boot_reps, request.alphas.clone(), request.seed);
    let boot = bootstrap_thetas(&fit, sample, &boot_cfg)?;
    let bands = build_bands(&fit, &boot, &boot_cfg)?;
    Ok(FitOutcome {
        plan,
        fit,
        bands,
        diagnostics,
        clamped_nodes: model.clamped_nodes(),
    })
}

/// 17 significant digits: enough for `f64` round trips.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One band CSV per alpha level, keyed by the alpha value.
pub fn band_csvs(outcome: &FitOutcome) -> Vec<(f64, String)> {
    let grid = &outcome.bands.grid;
    outcome
        .bands
        .per_alpha
        .iter()
        .map(|band| {
            let mut out =
                String::from("x,tau,theta_hat,sigma_hat,lo_two,hi_two,lo_left,hi_right,pt_lo,pt_hi\n");
            for (j, &x) in grid.x_points().iter().enumerate() {
                for (k, &tau) in grid.tau_points().iter().enumerate() {
                    let cells = [
                        x,
                        tau,
                        outcome.fit.theta_hat.get(j, k),
                        outcome.fit.sigma_hat.get(j, k),
                        band.lower_two.get(j, k),
                        band.upper_two.get(j, k),
                        band.lower_left.get(j, k),
                        band.upper_right.get(j, k),
                        band.pointwise_lower.get(j, k),
                        band.pointwise_upper.get(j, k),
                    ];
                    let row: Vec<String> = cells.iter().map(|&v| fmt17(v)).collect();
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
            }
            (band.alpha, out)
        })
        .collect()
}

/// The JSON fit summary: resolved configuration, bandwidth plan,
/// critical values, and numerical diagnostics.
pub fn summary_json(request: &FitRequest, outcome: &FitOutcome) -> String {
    #[derive(Serialize)]
    struct AlphaSummary {
        alpha: f64,
        c1: f64,
        c2: f64,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        version: &'static str,
        request: &'a FitRequest,
        bandwidths: &'a BandwidthPlan,
        x_points: &'a [f64],
        tau_points: &'a [f64],
        critical_values: Vec<AlphaSummary>,
        clamped_quadrature_nodes: u64,
        invalid_cells: usize,
        density_floor_hits: usize,
        sigma_floor_hits: usize,
    }
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION"),
        request,
        bandwidths: &outcome.plan,
        x_points: outcome.bands.grid.x_points(),
        tau_points: outcome.bands.grid.tau_points(),
        critical_values: outcome
            .bands
            .per_alpha
            .iter()
            .map(|b| AlphaSummary {
                alpha: b.alpha,
                c1: b.c1,
                c2: b.c2,
            })
            .collect(),
        clamped_quadrature_nodes: outcome.clamped_nodes,
        invalid_cells: outcome.fit.invalid_cells(),
        density_floor_hits: outcome.diagnostics.density_floor_hits,
        sigma_floor_hits: outcome.diagnostics.sigma_floor_hits,
    };
    serde_json::to_string_pretty(&summary).expect("summary serializes")
}

/// Static SVG of one tau slice: the fitted curve with the two-sided band
/// of the first alpha shaded.
pub fn svg_slice(outcome: &FitOutcome, tau_index: usize) -> Option<String> {
    let grid = &outcome.bands.grid;
    let band = outcome.bands.per_alpha.first()?;
    let tau = *grid.tau_points().get(tau_index)?;
    let mut pts: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (j, &x) in grid.x_points().iter().enumerate() {
        let theta = outcome.fit.theta_hat.get(j, tau_index);
        let lo = band.lower_two.get(j, tau_index);
        let hi = band.upper_two.get(j, tau_index);
        if theta.is_finite() && lo.is_finite() && hi.is_finite() {
            pts.push((x, theta, lo, hi));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let (width, height, margin) = (640.0, 420.0, 50.0);
    let x_min = pts.first().unwrap().0;
    let x_max = pts.last().unwrap().0;
    let y_min = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let y_max = pts.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.05 * (y_max - y_min).max(1e-9);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let sx = |x: f64| margin + (x - x_min) / (x_max - x_min) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - y_min) / (y_max - y_min) * (height - 2.0 * margin);
    let path_of = |ys: &mut dyn Iterator<Item = (f64, f64)>| -> String {
        ys.map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let upper = path_of(&mut pts.iter().map(|p| (p.0, p.3)));
    let lower = path_of(&mut pts.iter().rev().map(|p| (p.0, p.2)));
    let curve = path_of(&mut pts.iter().map(|p| (p.0, p.1)));
    let mut svg = String::new();
    let _ = write!(
        svg,
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<polygon points=\"{band}\" fill=\"#9ecae1\" fill-opacity=\"0.6\" stroke=\"none\"/>\n",
            "<polyline points=\"{curve}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"1.5\"/>\n",
            "<text x=\"{tx}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\" ",
            "text-anchor=\"middle\">tau = {tau} band (alpha = {alpha})</text>\n",
            "</svg>\n"
        ),
        w = width,
        h = height,
        band = format!("{upper} {lower}"),
        curve = curve,
        tx = width / 2.0,
        tau = tau,
        alpha = band.alpha,
    );
    Some(svg)
}

fn artifact_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "quantband".into());
    name.push_str(suffix);
    prefix.with_file_name(name)
}

/// Run `fit` end to end and write all artifacts; returns their paths.
pub fn fit_command(request: &FitRequest, quad: &QuadratureRule) -> CliResult<Vec<PathBuf>> {
    let (sample, aux, model) = ingest(request)?;
    let outcome = run_fit(request, &sample, &aux, &model, quad)?;
    let mut written = Vec::new();
    for (alpha, csv) in band_csvs(&outcome) {
        let path = artifact_path(&request.out_prefix, &format!("_band_alpha{alpha}.csv"));
        std::fs::write(&path, csv)?;
        written.push(path);
    }
    let path = artifact_path(&request.out_prefix, "_summary.json");
    std::fs::write(&path, summary_json(request, &outcome))?;
    written.push(path);
    if request.svg {
        for k in 0..outcome.bands.grid.tau_points().len() {
            if let Some(svg) = svg_slice(&outcome, k) {
                let tau = outcome.bands.grid.tau_points()[k];
                let path = artifact_path(&request.out_prefix, &format!("_slice_tau{tau}.svg"));
                std::fs::write(&path, svg)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Parse the JSON study config, run it, and write the table CSV plus a
/// sidecar echoing the resolved configuration.
pub fn simulate_command(
    config_path: &Path,
    out_path: &Path,
    seed_override: Option<u64>,
    quad: &QuadratureRule,
) -> CliResult<PathBuf> {
    let raw = std::fs::read_to_string(config_path)?;
    let mut config: SimConfig = serde_json::from_str(&raw).map_err(|e| CliError::Config {
        field: "simulate config".into(),
        message: e.to_string(),
    })?;
    if let Some(seed) = seed_override {
        config.master_seed = seed;
    }
    config.validate()?;
    let report = run_study(&config, quad)?;
    std::fs::write(out_path, study_csv(&config, &report))?;
    let sidecar = out_path.with_extension("config.json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "reps_completed": report.reps_completed,
            "failures": report.failures,
        }))
        .expect("config serializes"),
    )?;
    Ok(out_path.to_path_buf())
}

/// Compute and print the bandwidth plan for a dataset.
pub fn bandwidth_command(request: &FitRequest, quad: &QuadratureRule) -> CliResult<String> {
    let (sample, aux, model) = ingest(request)?;
    let (x_lo, x_hi) = request.x_region.unwrap_or_else(|| {
        let lo = sample.w().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sample.w().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let grid = match request.tau_region {
        TauRegion::Singleton(t) => {
            EvalGrid::new(crate::estimator::linspace(x_lo, x_hi, request.nx), vec![t])?
        }
        TauRegion::Interval(lo, hi) => {
            EvalGrid::equispaced(x_lo, x_hi, request.nx, lo, hi, request.ntau)?
        }
    };
    let mut tuning = request.tuning.clone();
    tuning.seed = request.seed;
    let plan = select_plan(
        &sample,
        &aux,
        &model,
        &tuning,
        request.tau_region.center(),
        &grid,
        quad,
        request.use_simex,
    )?;
    Ok(serde_json::to_string_pretty(&plan).expect("plan serializes"))
}

/// Deconvolution-kernel values as CSV: `x,k_value,imag_residual`.
pub fn kernel_dump(
    spec: &str,
    h: f64,
    xs: &[f64],
    quad: &QuadratureRule,
) -> CliResult<String> {
    let model = match spec {
        "none" => ErrorModel::no_error(),
        other => {
            if let Some(path) = other.strip_prefix("empirical:") {
                let (_, rows) = read_csv(Path::new(path), &[&["u"]])?;
                ErrorModel::empirical(rows.into_iter().map(|r| r[0]).collect())?
            } else {
                ErrorOverride::parse(other)?.model()
            }
        }
    };
    if !(h.is_finite() && h > 0.0) {
        return Err(CliError::Config {
            field: "h".into(),
            message: "bandwidth must be positive".into(),
        });
    }
    let kernel = DeconvKernel::new(&model, h, quad)?;
    let mut out = String::from("x,k_value,imag_residual\n");
    for &x in xs {
        let (re, im) = kernel.eval_components(x)?;
        out.push_str(&format!("{},{},{}\n", fmt17(x), fmt17(re), fmt17(im)));
    }
    Ok(out)
}
