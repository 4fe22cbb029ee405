//! Monte Carlo harness: data-generating processes, calibrated error
//! generators, coverage/size metrics, and study-table emission.

use crate::bands::{bootstrap_thetas, build_bands, BootstrapConfig};
use crate::bandwidth::{select_plan, TuningParams};
use crate::deconv::ErrorModel;
use crate::estimator::{fit_grid, EvalGrid, PrimarySample};
use crate::matrix::Matrix;
use crate::quad::QuadratureRule;
use crate::rng::{stream, tag};
use crate::variance::{sigma_hat, VarianceConfig};
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Data-generating process for the latent regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    /// `Y = X + e`.
    Linear,
    /// `Y = X^2 + e`.
    Quadratic,
    /// `Y = sin(X) + 0.5 e`.
    Sine,
}

impl Dgp {
    pub fn label(self) -> &'static str {
        match self {
            Dgp::Linear => "linear",
            Dgp::Quadratic => "quadratic",
            Dgp::Sine => "sine",
        }
    }
}

/// Measurement-error law, parameterized by the noise-to-signal variance
/// ratio `var(U) / var(X)` with `X` standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLaw {
    Laplace { ratio: f64 },
    Gaussian { ratio: f64 },
}

impl ErrorLaw {
    pub fn laplace_default() -> Self {
        ErrorLaw::Laplace { ratio: 0.25 }
    }

    pub fn gaussian_default() -> Self {
        ErrorLaw::Gaussian { ratio: 0.2 }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorLaw::Laplace { .. } => "laplace",
            ErrorLaw::Gaussian { .. } => "gaussian",
        }
    }

    pub fn ratio(self) -> f64 {
        match self {
            ErrorLaw::Laplace { ratio } | ErrorLaw::Gaussian { ratio } => ratio,
        }
    }

    /// Scale of the generator: Laplace `b` solves `2 b^2 = ratio`;
    /// Gaussian sd is `sqrt(ratio)`.
    pub fn scale(self) -> f64 {
        match self {
            ErrorLaw::Laplace { ratio } => (ratio / 2.0).sqrt(),
            ErrorLaw::Gaussian { ratio } => ratio.sqrt(),
        }
    }

    /// One draw from the error law.
    pub fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            ErrorLaw::Laplace { .. } => {
                let b = self.scale();
                let v: f64 = rng.gen_range(-0.5..0.5);
                -b * v.signum() * (1.0 - 2.0 * v.abs()).ln()
            }
            ErrorLaw::Gaussian { .. } => {
                let sd = self.scale();
                sd * rng.sample::<f64, _>(StandardNormal)
            }
        }
    }
}

/// The tau region the band covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRegion {
    Singleton(f64),
    Interval(f64, f64),
}

impl TauRegion {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            TauRegion::Singleton(t) => (t, t),
            TauRegion::Interval(lo, hi) => (lo, hi),
        }
    }

    pub fn center(self) -> f64 {
        let (lo, hi) = self.bounds();
        0.5 * (lo + hi)
    }

    /// Lebesgue measure of the region; 1 for a singleton so the band
    /// "size" stays an area in that case.
    pub fn measure(self) -> f64 {
        match self {
            TauRegion::Singleton(_) => 1.0,
            TauRegion::Interval(lo, hi) => hi - lo,
        }
    }
}

fn default_x_region() -> (f64, f64) {
    (-0.8, 0.8)
}

fn default_nx() -> usize {
    41
}

fn default_ntau() -> usize {
    6
}

/// Full description of one simulation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub dgp: Dgp,
    pub error: ErrorLaw,
    pub n: usize,
    /// Auxiliary error-sample size; defaults to `n`.
    #[serde(default)]
    pub m: Option<usize>,
    pub reps: usize,
    pub boot: BootstrapConfig,
    #[serde(default)]
    pub tuning: TuningParams,
    #[serde(default = "default_x_region")]
    pub x_region: (f64, f64),
    pub tau_region: TauRegion,
    pub master_seed: u64,
    /// Evaluation-grid sizes.
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(default = "default_ntau")]
    pub ntau: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.error.ratio() <= 0.0 {
            return Err(crate::NumericError::InvalidInput(
                "error.ratio must be positive".into(),
            ));
        }
        if self.reps < 1 {
            return Err(crate::NumericError::InvalidInput(
                "reps must be at least 1".into(),
            ));
        }
        if self.n < 2 {
            return Err(crate::NumericError::InvalidInput("n must be at least 2".into()));
        }
        let (lo, hi) = self.tau_region.bounds();
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(crate::NumericError::InvalidInput(
                "tau_region must lie inside (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m.unwrap_or(self.n)
    }

    pub fn grid(&self) -> Result<EvalGrid> {
        let (x_lo, x_hi) = self.x_region;
        match self.tau_region {
            TauRegion::Singleton(t) => {
                EvalGrid::new(crate::estimator::linspace(x_lo, x_hi, self.nx), vec![t])
            }
            TauRegion::Interval(lo, hi) => {
                EvalGrid::equispaced(x_lo, x_hi, self.nx, lo, hi, self.ntau)
            }
        }
    }

}

/// `theta_tau(x)` of the latent model, via the standard normal quantile.
pub fn true_quantile(dgp: Dgp, tau: f64, x: f64) -> f64 {
    assert!(tau > 0.0 && tau < 1.0);
    let z = Normal::standard().inverse_cdf(tau);
    match dgp {
        Dgp::Linear => x + z,
        Dgp::Quadratic => x * x + z,
        Dgp::Sine => x.sin() + 0.5 * z,
    }
}

/// Generate one replication's primary sample plus the auxiliary error
/// draws, deterministically from `(master_seed, rep_index)`.
pub fn gen_replication(config: &SimConfig, rep_index: usize) -> (PrimarySample, Vec<f64>) {
    let mut rng = stream(config.master_seed, tag::REPLICATION, rep_index as u64 + 1);
    let n = config.n;
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let u = config.error.sample(&mut rng);
        w.push(x + u);
        y.push(match config.dgp {
            Dgp::Linear => x + e,
            Dgp::Quadratic => x * x + e,
            Dgp::Sine => x.sin() + 0.5 * e,
        });
    }
    let aux: Vec<f64> = (0..config.m()).map(|_| config.error.sample(&mut rng)).collect();
    let sample = PrimarySample::new(w, y).expect("generated sample is finite and nonempty");
    (sample, aux)
}

/// Coverage and size of one band surface for one replication.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub alpha: f64,
    pub covered_uniform: bool,
    pub size_uniform: f64,
    pub covered_pointwise: bool,
    pub size_pointwise: f64,
    /// Cells where the pointwise critical value exceeded the uniform one.
    pub domination_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep_index: usize,
    pub invalid_cells: usize,
    pub per_alpha: Vec<AlphaRecord>,
}

/// Mean band width over the valid grid cells times the region measure: a
/// Riemann approximation of the band's area (singleton tau) or volume.
pub fn band_size(
    lower: &Matrix,
    upper: &Matrix,
    valid: impl Fn(usize, usize) -> bool,
    x_measure: f64,
    tau_measure: f64,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..lower.rows() {
        for k in 0..lower.cols() {
            if valid(j, k) && !lower.get(j, k).is_nan() && !upper.get(j, k).is_nan() {
                total += upper.get(j, k) - lower.get(j, k);
                count += 1;
            }
        }
    }
    if count == 0 {
        return f64::NAN;
    }
    total / count as f64 * x_measure * tau_measure
}

fn covered_everywhere(
    lower: &Matrix,
    upper: &Matrix,
    valid: impl Fn(usize, usize) -> bool,
    truth: &Matrix,
) -> bool {
    for j in 0..lower.rows() {
        for k in 0..lower.cols() {
            if !valid(j, k) || lower.get(j, k).is_nan() || upper.get(j, k).is_nan() {
                continue;
            }
            let t = truth.get(j, k);
            if t < lower.get(j, k) || t > upper.get(j, k) {
                return false;
            }
        }
    }
    true
}

fn derive_seed(master: u64, rep: usize, salt: u64) -> u64 {
    let mut state = master ^ salt.rotate_left(24) ^ (rep as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // One splitmix-style scramble so nearby reps get unrelated seeds.
    state = (state ^ (state >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    state ^ (state >> 31)
}

/// Run the full pipeline for one replication: bandwidth selection,
/// fitting, variance, bootstrap, bands, then coverage and size against
/// the true quantile surface.
pub fn run_replication(
    config: &SimConfig,
    rep_index: usize,
    quad: &QuadratureRule,
) -> Result<RepOutcome> {
    config.validate()?;
    let (sample, aux) = gen_replication(config, rep_index);
    let model = ErrorModel::empirical(aux.clone())?;
    let grid = config.grid()?;
    let mut tuning = config.tuning.clone();
    tuning.seed = derive_seed(config.master_seed, rep_index, 11);
    let plan = select_plan(
        &sample,
        &aux,
        &model,
        &tuning,
        config.tau_region.center(),
        &grid,
        quad,
        false,
    )?;
    let mut fit = fit_grid(&sample, &model, plan.h, &grid, quad)?;
    sigma_hat(&sample, &model, &mut fit, &VarianceConfig::new(plan.h_w, plan.h_y), quad)?;
    let mut boot_cfg = config.boot.clone();
    boot_cfg.seed = derive_seed(config.master_seed, rep_index, 13);
    let boot = bootstrap_thetas(&fit, &sample, &boot_cfg)?;
    let bands = build_bands(&fit, &boot, &boot_cfg)?;
    // Truth on the grid.
    let mut truth = Matrix::zeros(grid.x_points().len(), grid.tau_points().len());
    for (j, &x) in grid.x_points().iter().enumerate() {
        for (k, &t) in grid.tau_points().iter().enumerate() {
            truth.set(j, k, true_quantile(config.dgp, t, x));
        }
    }
    // Sizes are reported as the region-averaged band width (the tables'
    // "Avg. BS" convention): the Riemann area/volume divided by the
    // region measure, so singleton and interval tau studies are on the
    // same scale.
    let (xm, tm) = (1.0, 1.0);
    let mut per_alpha = Vec::with_capacity(bands.per_alpha.len());
    for band in &bands.per_alpha {
        let valid = |j: usize, k: usize| fit.is_valid(j, k);
        let mut violations = 0usize;
        for j in 0..grid.x_points().len() {
            for k in 0..grid.tau_points().len() {
                let pc2 = band.pointwise_c2.get(j, k);
                if valid(j, k) && !pc2.is_nan() && pc2 > band.c2 {
                    violations += 1;
                }
            }
        }
        per_alpha.push(AlphaRecord {
            alpha: band.alpha,
            covered_uniform: covered_everywhere(&band.lower_two, &band.upper_two, valid, &truth),
            size_uniform: band_size(&band.lower_two, &band.upper_two, valid, xm, tm),
            covered_pointwise: covered_everywhere(
                &band.pointwise_lower,
                &band.pointwise_upper,
                valid,
                &truth,
            ),
            size_pointwise: band_size(&band.pointwise_lower, &band.pointwise_upper, valid, xm, tm),
            domination_violations: violations,
        })
    }
    Ok(RepOutcome {
        rep_index,
        invalid_cells: fit.invalid_cells(),
        per_alpha,
    })
}

/// Aggregated study results for one alpha level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReportRow {
    pub alpha: f64,
    pub ecp_uniform: f64,
    pub size_uniform: f64,
    pub ecp_pointwise: f64,
    pub size_pointwise: f64,
    pub reps_completed: usize,
    pub failures: usize,
    pub invalid_cells_total: usize,
    pub domination_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub rows: Vec<SimReportRow>,
    pub reps_completed: usize,
    pub failures: usize,
}

/// Run every replication in parallel, then aggregate with a sequential
/// fold in `rep_index` order so the report is scheduling-independent.
pub fn run_study(config: &SimConfig, quad: &QuadratureRule) -> Result<SimReport> {
    config.validate()?;
    let outcomes: Vec<Result<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replication(config, rep, quad))
        .collect();
    let alphas = &config.boot.alphas;
    let mut covered_u = vec![0usize; alphas.len()];
    let mut covered_p = vec![0usize; alphas.len()];
    let mut size_u = vec![0.0f64; alphas.len()];
    let mut size_u_n = vec![0usize; alphas.len()];
    let mut size_p = vec![0.0f64; alphas.len()];
    let mut size_p_n = vec![0usize; alphas.len()];
    let mut violations = vec![0usize; alphas.len()];
    let mut invalid_total = 0usize;
    let mut completed = 0usize;
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(rep) => {
                completed += 1;
                invalid_total += rep.invalid_cells;
                for (a, rec) in rep.per_alpha.iter().enumerate() {
                    if rec.covered_uniform {
                        covered_u[a] += 1;
                    }
                    if rec.covered_pointwise {
                        covered_p[a] += 1;
                    }
                    if rec.size_uniform.is_finite() {
                        size_u[a] += rec.size_uniform;
                        size_u_n[a] += 1;
                    }
                    if rec.size_pointwise.is_finite() {
                        size_p[a] += rec.size_pointwise;
                        size_p_n[a] += 1;
                    }
                    violations[a] += rec.domination_violations;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let rows = alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| SimReportRow {
            alpha,
            ecp_uniform: covered_u[a] as f64 / completed.max(1) as f64,
            size_uniform: size_u[a] / size_u_n[a].max(1) as f64,
            ecp_pointwise: covered_p[a] as f64 / completed.max(1) as f64,
            size_pointwise: size_p[a] / size_p_n[a].max(1) as f64,
            reps_completed: completed,
            failures,
            invalid_cells_total: invalid_total,
            domination_violations: violations[a],
        })
        .collect();
    Ok(SimReport {
        rows,
        reps_completed: completed,
        failures,
    })
}

/// Study table as CSV, one row per alpha, mirroring the simulation-table
/// layout.
pub fn study_csv(config: &SimConfig, report: &SimReport) -> String {
    let mut out = String::from(
        "dgp,error,n,alpha,tau_lo,tau_hi,ecp_uniform,size_uniform,ecp_pointwise,size_pointwise,reps,failures\n",
    );
    let (tau_lo, tau_hi) = config.tau_region.bounds();
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            config.dgp.label(),
            config.error.label(),
            config.n,
            row.alpha,
            tau_lo,
            tau_hi,
            row.ecp_uniform,
            row.size_uniform,
            row.ecp_pointwise,
            row.size_pointwise,
            row.reps_completed,
            row.failures,
        ));
    }
    out
}
