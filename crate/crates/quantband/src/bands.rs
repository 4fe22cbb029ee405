//! Multiplier-bootstrap uniform confidence bands.
//!
//! Each bootstrap replicate perturbs the estimating equation with i.i.d.
//! mean-one multipliers `chi_i = 1 + N(0,1)` and refits the quantile curve
//! on the grid, reusing the cached kernel weights. The empirical
//! `(1 - alpha)` quantiles of the standardized one- and two-sided suprema
//! give the critical values; the per-cell quantiles give the pointwise
//! comparison band.

use crate::estimator::{fit_point, EvalGrid, PrimarySample, QuantileGridFit};
use crate::matrix::Matrix;
use crate::rng::{stream, tag};
use crate::{NumericError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Law of the bootstrap multipliers. Only the mean-one Gaussian shift
/// `chi = 1 + N(0,1)` is implemented; it has unit variance and
/// sub-Gaussian tails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Multiplier {
    #[default]
    GaussianShift,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BootstrapConfig {
    /// Number of bootstrap replicates.
    pub reps: usize,
    /// Confidence levels `1 - alpha` to produce bands for.
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub multiplier: Multiplier,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(reps: usize, alphas: Vec<f64>, seed: u64) -> Self {
        assert!(reps >= 1);
        assert!(alphas.iter().all(|&a| a > 0.0 && a < 1.0));
        BootstrapConfig {
            reps,
            alphas,
            multiplier: Multiplier::GaussianShift,
            seed,
        }
    }
}

/// Band surfaces and critical values at one confidence level.
#[derive(Debug, Clone)]
pub struct AlphaBand {
    pub alpha: f64,
    /// One-sided critical value (shared by the left and right bands).
    pub c1: f64,
    /// Two-sided critical value.
    pub c2: f64,
    pub lower_two: Matrix,
    pub upper_two: Matrix,
    /// Lower limit of the left one-sided band `(theta - c1 sigma, inf)`.
    pub lower_left: Matrix,
    /// Upper limit of the right one-sided band `(-inf, theta + c1 sigma)`.
    pub upper_right: Matrix,
    /// Per-cell two-sided critical values of the pointwise band.
    pub pointwise_c2: Matrix,
    pub pointwise_lower: Matrix,
    pub pointwise_upper: Matrix,
}

#[derive(Debug, Clone)]
pub struct UniformBand {
    pub grid: EvalGrid,
    pub per_alpha: Vec<AlphaBand>,
}

/// `n` draws of `1 + N(0,1)` from the given stream.
pub fn draw_multipliers<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Bootstrap curve estimates: one `|x| x |tau|` matrix per replicate.
/// Replicate `b` draws its multipliers from the stream keyed by
/// `(cfg.seed, b)`, so enlarging `reps` keeps earlier replicates intact.
pub fn bootstrap_thetas(
    fit: &QuantileGridFit,
    sample: &PrimarySample,
    cfg: &BootstrapConfig,
) -> Result<Vec<Matrix>> {
    let nx = fit.grid.x_points().len();
    let ntau = fit.grid.tau_points().len();
    (0..cfg.reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(cfg.seed, tag::BOOTSTRAP, b as u64 + 1);
            let chi = draw_multipliers(sample.len(), &mut rng);
            let mut out = Matrix::filled(nx, ntau, f64::NAN);
            let mut scaled = vec![0.0; sample.len()];
            for j in 0..nx {
                let row = fit.weight_cache.row(j);
                for (s, (&w, &c)) in scaled.iter_mut().zip(row.iter().zip(&chi)) {
                    *s = w * c;
                }
                for (k, &tau) in fit.grid.tau_points().iter().enumerate() {
                    if !fit.is_valid(j, k) {
                        continue;
                    }
                    match fit_point(&scaled, sample, tau) {
                        Ok(theta) => out.set(j, k, theta),
                        Err(NumericError::DegenerateWeights { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Per-replicate standardized suprema `(M1, M2)` over the valid cells.
pub fn sup_stats(boot: &[Matrix], fit: &QuantileGridFit) -> Result<Vec<(f64, f64)>> {
    let nx = fit.grid.x_points().len();
    let ntau = fit.grid.tau_points().len();
    let mut any_valid = false;
    'outer: for j in 0..nx {
        for k in 0..ntau {
            if fit.is_valid(j, k) {
                any_valid = true;
                break 'outer;
            }
        }
    }
    if !any_valid {
        return Err(NumericError::EmptyGrid);
    }
    let mut out = Vec::with_capacity(boot.len());
    for bmat in boot {
        let mut m1 = f64::NEG_INFINITY;
        let mut m2 = f64::NEG_INFINITY;
        for j in 0..nx {
            for k in 0..ntau {
                if !fit.is_valid(j, k) || bmat.get(j, k).is_nan() {
                    continue;
                }
                let z = (bmat.get(j, k) - fit.theta_hat.get(j, k)) / fit.sigma_hat.get(j, k);
                m1 = m1.max(z);
                m2 = m2.max(z.abs());
            }
        }
        out.push((m1, m2));
    }
    Ok(out)
}

/// The `ceil((1 - alpha) B)`-th order statistic (1-indexed).
pub fn critical_value(stats: &[f64], alpha: f64) -> f64 {
    assert!(!stats.is_empty());
    assert!(alpha > 0.0 && alpha < 1.0);
    let b = stats.len();
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((1.0 - alpha) * b as f64).ceil() as usize;
    sorted[rank.clamp(1, b) - 1]
}

/// Assemble all band surfaces from the bootstrap replicates.
pub fn build_bands(
    fit: &QuantileGridFit,
    boot: &[Matrix],
    cfg: &BootstrapConfig,
) -> Result<UniformBand> {
    let stats = sup_stats(boot, fit)?;
    let m1: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let m2: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let nx = fit.grid.x_points().len();
    let ntau = fit.grid.tau_points().len();
    let mut per_alpha = Vec::with_capacity(cfg.alphas.len());
    for &alpha in &cfg.alphas {
        let c1 = critical_value(&m1, alpha);
        let c2 = critical_value(&m2, alpha);
        let mut band = AlphaBand {
            alpha,
            c1,
            c2,
            lower_two: Matrix::filled(nx, ntau, f64::NAN),
            upper_two: Matrix::filled(nx, ntau, f64::NAN),
            lower_left: Matrix::filled(nx, ntau, f64::NAN),
            upper_right: Matrix::filled(nx, ntau, f64::NAN),
            pointwise_c2: Matrix::filled(nx, ntau, f64::NAN),
            pointwise_lower: Matrix::filled(nx, ntau, f64::NAN),
            pointwise_upper: Matrix::filled(nx, ntau, f64::NAN),
        };
        let mut cell_stats = Vec::with_capacity(boot.len());
        for j in 0..nx {
            for k in 0..ntau {
                if !fit.is_valid(j, k) {
                    continue;
                }
                let theta = fit.theta_hat.get(j, k);
                let sigma = fit.sigma_hat.get(j, k);
                band.lower_two.set(j, k, theta - c2 * sigma);
                band.upper_two.set(j, k, theta + c2 * sigma);
                band.lower_left.set(j, k, theta - c1 * sigma);
                band.upper_right.set(j, k, theta + c1 * sigma);
                cell_stats.clear();
                for bmat in boot {
                    let v = bmat.get(j, k);
                    if !v.is_nan() {
                        cell_stats.push(((v - theta) / sigma).abs());
                    }
                }
                if !cell_stats.is_empty() {
                    let pc2 = critical_value(&cell_stats, alpha);
                    band.pointwise_c2.set(j, k, pc2);
                    band.pointwise_lower.set(j, k, theta - pc2 * sigma);
                    band.pointwise_upper.set(j, k, theta + pc2 * sigma);
                }
            }
        }
        per_alpha.push(band);
    }
    Ok(UniformBand {
        grid: fit.grid.clone(),
        per_alpha,
    })
}
