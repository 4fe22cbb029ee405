//! The deconvolution-kernel quantile regression estimator on an `(x, tau)`
//! grid.
//!
//! For each grid point the estimate is the minimizer of
//! `|n^-1 sum_i psi_tau(Y_i - theta) K_{U,h}(x - W_i)|` over the midpoints
//! of consecutive order statistics of `Y`. The objective satisfies
//!
//! ```text
//! n^-1 sum_i w_i psi_tau(y_i - theta) = (tau * S - P(theta)) / n
//! ```
//!
//! with `S = sum w_i` and `P(theta) = sum_{y_i < theta} w_i`, so sweeping
//! the sorted candidates with prefix sums evaluates all of them in `O(n)`.

use crate::deconv::{DeconvKernel, ErrorModel};
use crate::matrix::Matrix;
use crate::quad::QuadratureRule;
use crate::{NumericError, Result};

/// Paired observations `(W_i, Y_i)` with the cached sort of `Y`.
#[derive(Debug, Clone)]
pub struct PrimarySample {
    w: Vec<f64>,
    y: Vec<f64>,
    /// Indices permuting `y` into ascending order.
    order: Vec<usize>,
}

impl PrimarySample {
    pub fn new(w: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if w.len() != y.len() {
            return Err(NumericError::InvalidInput(format!(
                "covariate/response length mismatch: {} vs {}",
                w.len(),
                y.len()
            )));
        }
        if w.len() < 2 {
            return Err(NumericError::InvalidInput(
                "need at least 2 observations".into(),
            ));
        }
        if w.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(NumericError::InvalidInput(
                "non-finite observation".into(),
            ));
        }
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        Ok(PrimarySample { w, y, order })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sorted_index(&self) -> &[usize] {
        &self.order
    }

    /// Subsample by observation index (re-sorts the response).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let w = keep.iter().map(|&i| self.w[i]).collect();
        let y = keep.iter().map(|&i| self.y[i]).collect();
        PrimarySample::new(w, y)
    }
}

/// `psi_tau(u) = tau - 1{u < 0}`.
pub fn psi(tau: f64, u: f64) -> f64 {
    debug_assert!(tau > 0.0 && tau < 1.0);
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

/// The estimating function `n^-1 sum_i w_i psi_tau(y_i - theta)`.
pub fn objective(theta: f64, weights: &[f64], y: &[f64], tau: f64) -> f64 {
    assert_eq!(weights.len(), y.len());
    let n = y.len() as f64;
    weights
        .iter()
        .zip(y)
        .map(|(&w, &yi)| w * psi(tau, yi - theta))
        .sum::<f64>()
        / n
}

/// Midpoints of consecutive order statistics, with `Y_(n+1) = Y_(n)`.
pub fn candidate_thetas(sample: &PrimarySample) -> Vec<f64> {
    let y = sample.y();
    let ord = sample.sorted_index();
    let n = sample.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let a = y[ord[k]];
        let b = y[ord[(k + 1).min(n - 1)]];
        out.push((a + b) / 2.0);
    }
    out
}

/// Argmin of `|objective|` over the sorted-midpoint candidates; ties go to
/// the smallest theta. One prefix-sum sweep in sorted order, exactly
/// reproducing a candidate-by-candidate evaluation that accumulates the
/// below-theta weight sum in the same order.
pub fn fit_point(weights: &[f64], sample: &PrimarySample, tau: f64) -> Result<f64> {
    assert_eq!(weights.len(), sample.len());
    assert!(tau > 0.0 && tau < 1.0);
    if weights.iter().map(|w| w.abs()).sum::<f64>() == 0.0 {
        return Err(NumericError::DegenerateWeights { x: f64::NAN });
    }
    let y = sample.y();
    let ord = sample.sorted_index();
    let n = sample.len();
    // Total weight, accumulated in sorted order so the sweep and any
    // sorted-order re-evaluation agree bitwise.
    let mut total = 0.0;
    for &i in ord {
        total += weights[i];
    }
    let candidates = candidate_thetas(sample);
    let nf = n as f64;
    let mut below = 0.0; // running sum of weights with y_i < theta
    let mut idx = 0usize;
    let mut best_theta = candidates[0];
    let mut best_abs = f64::INFINITY;
    for &theta in &candidates {
        while idx < n && y[ord[idx]] < theta {
            below += weights[ord[idx]];
            idx += 1;
        }
        let val = ((tau * total - below) / nf).abs();
        if val < best_abs {
            best_abs = val;
            best_theta = theta;
        }
    }
    Ok(best_theta)
}

/// Rectangular evaluation grid over covariate values and quantile levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    x_points: Vec<f64>,
    tau_points: Vec<f64>,
}

impl EvalGrid {
    pub fn new(x_points: Vec<f64>, tau_points: Vec<f64>) -> Result<Self> {
        if x_points.is_empty() || tau_points.is_empty() {
            return Err(NumericError::InvalidInput("empty evaluation grid".into()));
        }
        if !x_points.windows(2).all(|p| p[0] < p[1]) {
            return Err(NumericError::InvalidInput(
                "x points must be strictly increasing".into(),
            ));
        }
        if !tau_points.windows(2).all(|p| p[0] < p[1]) {
            return Err(NumericError::InvalidInput(
                "tau points must be strictly increasing".into(),
            ));
        }
        if tau_points.iter().any(|&t| t <= 0.0 || t >= 1.0) {
            return Err(NumericError::InvalidInput(
                "tau points must lie in (0, 1)".into(),
            ));
        }
        Ok(EvalGrid {
            x_points,
            tau_points,
        })
    }

    /// Equispaced grid; a singleton tau region yields a single tau point.
    pub fn equispaced(x_lo: f64, x_hi: f64, nx: usize, tau_lo: f64, tau_hi: f64, ntau: usize) -> Result<Self> {
        let x_points = linspace(x_lo, x_hi, nx);
        let tau_points = if tau_lo == tau_hi || ntau == 1 {
            vec![tau_lo]
        } else {
            linspace(tau_lo, tau_hi, ntau)
        };
        EvalGrid::new(x_points, tau_points)
    }

    pub fn x_points(&self) -> &[f64] {
        &self.x_points
    }

    pub fn tau_points(&self) -> &[f64] {
        &self.tau_points
    }

    pub fn n_cells(&self) -> usize {
        self.x_points.len() * self.tau_points.len()
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Quantile curve estimates on a grid, the cached kernel-weight matrix the
/// bootstrap reuses, and (after `variance::sigma_hat`) the standard errors.
#[derive(Debug, Clone)]
pub struct QuantileGridFit {
    pub grid: EvalGrid,
    pub h: f64,
    /// `(j, k) -> theta_hat(x_j, tau_k)`; NaN on invalid cells.
    pub theta_hat: Matrix,
    /// `(j, k) -> sigma_hat(x_j, tau_k)`; zero until filled.
    pub sigma_hat: Matrix,
    /// `(j, i) -> K_{U,h}(x_j - W_i)`.
    pub weight_cache: Matrix,
    /// Cell validity; false where kernel weights degenerated.
    pub valid: Vec<bool>,
}

impl QuantileGridFit {
    pub fn is_valid(&self, j: usize, k: usize) -> bool {
        self.valid[j * self.grid.tau_points().len() + k]
    }

    pub fn invalid_cells(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Fit the quantile curve at every grid cell.
pub fn fit_grid(
    sample: &PrimarySample,
    model: &ErrorModel,
    h: f64,
    grid: &EvalGrid,
    quad: &QuadratureRule,
) -> Result<QuantileGridFit> {
    assert!(h > 0.0);
    let kernel = DeconvKernel::new(model, h, quad)?;
    let weight_cache = kernel.weight_matrix(grid.x_points(), sample.w())?;
    let ntau = grid.tau_points().len();
    let mut theta_hat = Matrix::filled(grid.x_points().len(), ntau, f64::NAN);
    let mut valid = vec![false; grid.n_cells()];
    for j in 0..grid.x_points().len() {
        let weights = weight_cache.row(j);
        for (k, &tau) in grid.tau_points().iter().enumerate() {
            match fit_point(weights, sample, tau) {
                Ok(theta) => {
                    theta_hat.set(j, k, theta);
                    valid[j * ntau + k] = true;
                }
                Err(NumericError::DegenerateWeights { .. }) => {
                    // Cell stays invalid; the bands skip it.
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(QuantileGridFit {
        grid: grid.clone(),
        h,
        theta_hat,
        sigma_hat: Matrix::zeros(grid.x_points().len(), ntau),
        weight_cache,
        valid,
    })
}
