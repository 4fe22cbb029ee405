//! The bivariate deconvolution density and the plug-in variance estimator.
//!
//! `sigma_hat(x, tau)` standardizes the bootstrap supremum statistics. It
//! divides by the squared bivariate density estimate at the fitted curve,
//! which is floored below before inversion because the deconvolution kernel
//! is not nonnegative and small-sample estimates can dip to zero.

use crate::deconv::{base_kernel, DeconvKernel, ErrorModel};
use crate::estimator::{psi, PrimarySample, QuantileGridFit};
use crate::quad::QuadratureRule;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct VarianceConfig {
    pub h_w: f64,
    pub h_y: f64,
    /// Lower clamp applied to the bivariate density before squaring.
    pub density_floor: f64,
    /// Lower clamp applied to the resulting standard error.
    pub sigma_floor: f64,
}

impl VarianceConfig {
    pub fn new(h_w: f64, h_y: f64) -> Self {
        assert!(h_w > 0.0 && h_y > 0.0);
        VarianceConfig {
            h_w,
            h_y,
            density_floor: 1e-3,
            sigma_floor: 1e-12,
        }
    }
}

/// How often the clamps were binding while filling the grid.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct VarianceDiagnostics {
    pub density_floor_hits: usize,
    pub sigma_floor_hits: usize,
}

/// `f_hat_{X,Y}(x, y) = n^-1 sum_i K_{h_Y}(y - Y_i) K_{U,h_W}(x - W_i)`,
/// unclamped (may be negative).
pub fn joint_density(
    sample: &PrimarySample,
    model: &ErrorModel,
    cfg: &VarianceConfig,
    x: f64,
    yv: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    let kernel = DeconvKernel::new(model, cfg.h_w, quad)?;
    let n = sample.len() as f64;
    let mut acc = 0.0;
    for (&wi, &yi) in sample.w().iter().zip(sample.y()) {
        let ky = base_kernel((yv - yi) / cfg.h_y, quad) / cfg.h_y;
        acc += ky * kernel.eval(x - wi)?;
    }
    Ok(acc / n)
}

/// Fill `fit.sigma_hat` with the plug-in standard errors
/// `sigma_n(x, tau) = sqrt( [n f_hat(x, theta_hat)]^-2 sum_i K^2_{U,h}(x - W_i) psi^2_tau(Y_i - theta_hat) )`,
/// reusing the fit's kernel-weight cache for the squared weights.
pub fn sigma_hat(
    sample: &PrimarySample,
    model: &ErrorModel,
    fit: &mut QuantileGridFit,
    cfg: &VarianceConfig,
    quad: &QuadratureRule,
) -> Result<VarianceDiagnostics> {
    let n = sample.len() as f64;
    let mut diag = VarianceDiagnostics::default();
    let density_kernel = DeconvKernel::new(model, cfg.h_w, quad)?;
    // K_{U,h_W}(x_j - W_i) for the density, one row per grid x.
    let density_weights = density_kernel.weight_matrix(fit.grid.x_points(), sample.w())?;
    let taus = fit.grid.tau_points().to_vec();
    for j in 0..fit.grid.x_points().len() {
        let dw_row = density_weights.row(j).to_vec();
        let kw_row = fit.weight_cache.row(j).to_vec();
        for (k, &tau) in taus.iter().enumerate() {
            if !fit.is_valid(j, k) {
                continue;
            }
            let theta = fit.theta_hat.get(j, k);
            let mut fxy = 0.0;
            let mut numer = 0.0;
            for (i, &yi) in sample.y().iter().enumerate() {
                let ky = base_kernel((theta - yi) / cfg.h_y, quad) / cfg.h_y;
                fxy += ky * dw_row[i];
                let p = psi(tau, yi - theta);
                numer += kw_row[i] * kw_row[i] * p * p;
            }
            fxy /= n;
            if fxy < cfg.density_floor {
                fxy = cfg.density_floor;
                diag.density_floor_hits += 1;
            }
            let var = numer / (n * fxy).powi(2);
            let mut sigma = var.sqrt();
            if sigma < cfg.sigma_floor {
                sigma = cfg.sigma_floor;
                diag.sigma_floor_hits += 1;
            }
            fit.sigma_hat.set(j, k, sigma);
        }
    }
    Ok(diag)
}
