//! Bandwidth selection: the cross-validation pilot, the undersmoothing
//! search, the AMISE bandwidths for the bivariate density, the weighting
//! bandwidth `b` of the CV criterion, and the SIMEX alternative pilot.

use crate::deconv::{
    fourier_kernel, sample_variance, DeconvKernel, ErrorModel, KernelMoments,
};
use crate::estimator::{fit_point, linspace, EvalGrid, PrimarySample};
use crate::quad::QuadratureRule;
use crate::rng::{stream, tag};
use crate::{NumericError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Tuning constants of the selection pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningParams {
    /// Cross-validation folds.
    pub j_folds: usize,
    /// Oversmoothing factor applied to the pilot.
    pub zeta: f64,
    /// Number of bandwidth steps in the undersmoothing scan.
    pub l_steps: usize,
    /// Kink-detection multiplier in the undersmoothing scan.
    pub rho: f64,
    /// SIMEX replicates.
    pub d_reps: usize,
    /// Candidate grid for the pilot search; `None` derives one from the data.
    pub h_grid: Option<Vec<f64>>,
    /// Seed for fold shuffling and SIMEX resampling.
    pub seed: u64,
}

impl Default for TuningParams {
    fn default() -> Self {
        TuningParams {
            j_folds: 5,
            zeta: 1.3,
            l_steps: 20,
            rho: 3.0,
            d_reps: 30,
            h_grid: None,
            seed: 0,
        }
    }
}

/// Default pilot grid: 32 log-spaced candidates on
/// `[0.05, 2] * sd(W) * n^(-1/9)`.
pub fn default_h_grid(w: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let scale = sample_variance(w).sqrt() * n.powf(-1.0 / 9.0);
    log_spaced(0.05 * scale, 2.0 * scale, 32)
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

/// The check function `L_tau(u) = (tau - 1{u < 0}) u`.
pub fn check_loss(tau: f64, u: f64) -> f64 {
    debug_assert!(tau > 0.0 && tau < 1.0);
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// Where a bandwidth plan came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    CvPilot,
    Simex,
    Manual,
}

/// The selected bandwidths and their provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandwidthPlan {
    /// Undersmoothed estimation bandwidth.
    pub h: f64,
    /// Pilot bandwidth before undersmoothing.
    pub h_opt: f64,
    /// Bivariate-density bandwidths for the variance estimator.
    pub h_w: f64,
    pub h_y: f64,
    /// Weighting bandwidth of the CV criterion.
    pub b: f64,
    pub provenance: Provenance,
    /// Undersmoothing step `k` actually chosen and the scan length `L`.
    pub undersmooth_k: usize,
    pub undersmooth_l: usize,
}

/// Normal-reference deconvolution-AMISE surrogate for the CV weighting
/// bandwidth `b`: minimizes
/// `(2 pi n b)^-1 int phi_K^2 / |phi_U(t/b)|^2 dt + (kappa21^2 b^4 / 4) * 3 / (8 sqrt(pi) sigma_X^5)`
/// over a 64-point log grid on `[0.05, 5] * sigma_X`, with
/// `sigma_X^2 = max(var(W) - var(U), 1e-6)`.
pub fn weight_bandwidth_b(
    w: &[f64],
    model: &ErrorModel,
    moments: &KernelMoments,
    quad: &QuadratureRule,
) -> Result<f64> {
    let n = w.len() as f64;
    let sigma_x2 = (sample_variance(w) - model.error_variance()).max(1e-6);
    let sigma_x = sigma_x2.sqrt();
    let grid = log_spaced(0.05 * sigma_x, 5.0 * sigma_x, 64);
    let bias_const =
        moments.kappa21 * moments.kappa21 / 4.0 * 3.0 / (8.0 * std::f64::consts::PI.sqrt() * sigma_x.powi(5));
    let floor = model.clamp_floor();
    let mut best = None;
    for &b in &grid {
        let integral = quad.integrate(|t| {
            let denom = model.charfn(t / b).norm().max(floor);
            let fk = fourier_kernel(t);
            fk * fk / (denom * denom)
        });
        let val = integral / (TWO_PI * n * b) + bias_const * b.powi(4);
        if val.is_finite() {
            match best {
                None => best = Some((b, val)),
                Some((_, bv)) if val < bv => best = Some((b, val)),
                _ => {}
            }
        }
    }
    best.map(|(b, _)| b).ok_or(NumericError::NoFiniteCandidate)
}

/// Fold assignment: seeded shuffle, then `J` contiguous blocks.
pub fn fold_indices(n: usize, j_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let j = j_folds.min(n).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, tag::FOLDS, 0);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let k = rng.gen_range(0..=i);
        idx.swap(i, k);
    }
    let base = n / j;
    let extra = n % j;
    let mut out = Vec::with_capacity(j);
    let mut pos = 0;
    for f in 0..j {
        let len = base + usize::from(f < extra);
        out.push(idx[pos..pos + len].to_vec());
        pos += len;
    }
    out
}

fn trapezoid_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i == 0 || i + 1 == n { 0.5 } else { 1.0 })
        .collect()
}

/// The J-fold CV criterion for one bandwidth, integrating the held-out
/// check loss against the deconvolution weight `K_{U,b}(x - W_i)` over
/// `[min W, max W]` with a 64-point trapezoid. Degenerate fits force the
/// value to infinity so the candidate is never selected.
#[allow(clippy::too_many_arguments)]
fn cv_criterion(
    sample: &PrimarySample,
    model: &ErrorModel,
    h: f64,
    tau0: f64,
    folds: &[Vec<usize>],
    x_nodes: &[f64],
    weight_b: &crate::matrix::Matrix,
    quad: &QuadratureRule,
) -> Result<f64> {
    let n = sample.len();
    let dx = if x_nodes.len() > 1 {
        x_nodes[1] - x_nodes[0]
    } else {
        1.0
    };
    let tw = trapezoid_weights(x_nodes.len());
    let kernel = DeconvKernel::new(model, h, quad)?;
    let weights_h = kernel.weight_matrix(x_nodes, sample.w())?;
    let mut total = 0.0;
    for fold in folds {
        let mut in_fold = vec![false; n];
        for &i in fold {
            in_fold[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
        if train.len() < 2 {
            continue;
        }
        let train_sample = sample.subset(&train)?;
        // theta_hat on the x nodes, fitted without the held-out fold.
        let mut theta = Vec::with_capacity(x_nodes.len());
        for (g, _) in x_nodes.iter().enumerate() {
            let row = weights_h.row(g);
            let tw_row: Vec<f64> = train.iter().map(|&i| row[i]).collect();
            match fit_point(&tw_row, &train_sample, tau0) {
                Ok(t) => theta.push(t),
                Err(NumericError::DegenerateWeights { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        for &i in fold {
            let yi = sample.y()[i];
            let mut integral = 0.0;
            for (g, &t) in theta.iter().enumerate() {
                integral += tw[g] * check_loss(tau0, yi - t) * weight_b.get(g, i) * dx;
            }
            total += integral;
        }
    }
    Ok(total / n as f64)
}

/// J-fold cross-validation pilot bandwidth: argmin of the CV criterion
/// over the candidate grid.
pub fn cv_pilot(
    sample: &PrimarySample,
    model: &ErrorModel,
    params: &TuningParams,
    tau0: f64,
    b_weight: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    let h_grid = params
        .h_grid
        .clone()
        .unwrap_or_else(|| default_h_grid(sample.w()));
    if h_grid.is_empty() {
        return Err(NumericError::NoFiniteCandidate);
    }
    let lo = sample.w().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sample.w().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_nodes = linspace(lo, hi, 64);
    let kernel_b = DeconvKernel::new(model, b_weight, quad)?;
    let weight_b = kernel_b.weight_matrix(&x_nodes, sample.w())?;
    let folds = fold_indices(sample.len(), params.j_folds, params.seed);
    let mut best: Option<(f64, f64)> = None;
    for &h in &h_grid {
        let cv = cv_criterion(sample, model, h, tau0, &folds, &x_nodes, &weight_b, quad)?;
        if cv.is_finite() {
            match best {
                None => best = Some((h, cv)),
                Some((_, bv)) if cv < bv => best = Some((h, cv)),
                _ => {}
            }
        }
    }
    best.map(|(h, _)| h).ok_or(NumericError::NoFiniteCandidate)
}

/// Undersmoothing search: fits the curve at `h_l = (l/L) zeta h_opt` for
/// `l = 1..L`, finds the largest `k` whose consecutive sup-difference
/// exceeds `rho` times the last one, and floors the ratio at
/// `(log n)^-1`. Returns `(h, k)`.
pub fn undersmooth(
    sample: &PrimarySample,
    model: &ErrorModel,
    h_opt: f64,
    params: &TuningParams,
    grid: &EvalGrid,
    quad: &QuadratureRule,
) -> Result<(f64, usize)> {
    assert!(h_opt > 0.0);
    let l = params.l_steps;
    assert!(l >= 2);
    let h_over = params.zeta * h_opt;
    let mut fits = Vec::with_capacity(l);
    for step in 1..=l {
        let h_l = step as f64 / l as f64 * h_over;
        fits.push(crate::estimator::fit_grid(sample, model, h_l, grid, quad)?);
    }
    // sup over cells valid in both consecutive fits.
    let sup_diff = |a: &crate::estimator::QuantileGridFit,
                    b: &crate::estimator::QuantileGridFit|
     -> f64 {
        let mut m = 0.0f64;
        for j in 0..grid.x_points().len() {
            for k in 0..grid.tau_points().len() {
                if a.is_valid(j, k) && b.is_valid(j, k) {
                    m = m.max((a.theta_hat.get(j, k) - b.theta_hat.get(j, k)).abs());
                }
            }
        }
        m
    };
    let diffs: Vec<f64> = (1..l).map(|i| sup_diff(&fits[i], &fits[i - 1])).collect();
    let last = diffs[l - 2];
    let mut chosen = 1usize;
    for k in (2..=l).rev() {
        if diffs[k - 2] > params.rho * last {
            chosen = k;
            break;
        }
    }
    let n = sample.len() as f64;
    let ratio = (chosen as f64 / l as f64).max(1.0 / n.ln());
    Ok((ratio * h_over, chosen))
}

/// AMISE-minimizing `(h_W, h_Y)` for the bivariate density, by a 32x32
/// log-grid search with one halved-spacing refinement around the argmin.
pub fn amise_hw_hy(
    sample: &PrimarySample,
    model: &ErrorModel,
    moments: &KernelMoments,
    quad: &QuadratureRule,
) -> Result<(f64, f64)> {
    let n = sample.len() as f64;
    let sigma_w2 = sample_variance(sample.w());
    let sigma_y2 = sample_variance(sample.y());
    let sigma_u2 = model.error_variance();
    if sigma_w2 <= sigma_u2 {
        return Err(NumericError::NegativeSignalVariance);
    }
    let sigma_x2 = sigma_w2 - sigma_u2;
    let sigma_x = sigma_x2.sqrt();
    let sigma_y = sigma_y2.sqrt();
    let mean_w = sample.w().iter().sum::<f64>() / n;
    let mean_y = sample.y().iter().sum::<f64>() / n;
    let cov_wy = sample
        .w()
        .iter()
        .zip(sample.y())
        .map(|(&w, &y)| (w - mean_w) * (y - mean_y))
        .sum::<f64>()
        / (n - 1.0);
    let rho = (cov_wy / (sigma_y * sigma_x)).clamp(-0.99, 0.99);
    let one_m_rho = (1.0 - rho * rho).powf(2.5);
    let k2 = moments.kappa21 * moments.kappa21;
    let pi = std::f64::consts::PI;
    let c_w = 3.0 * k2 / (64.0 * pi * one_m_rho * sigma_x.powi(5) * sigma_y);
    let c_y = 3.0 * k2 / (64.0 * pi * one_m_rho * sigma_y.powi(5) * sigma_x);
    let c_wy = (1.0 + 2.0 * rho * rho) * k2 / (32.0 * pi * one_m_rho * sigma_x.powi(3) * sigma_y.powi(3));
    let floor = model.clamp_floor();
    let var_integral = |h_w: f64| -> f64 {
        quad.integrate(|t| {
            let d = model.charfn(t / h_w).norm().max(floor);
            let fk = fourier_kernel(t);
            fk * fk / (d * d)
        })
    };
    let objective = |h_w: f64, h_y: f64, integral: f64| -> f64 {
        moments.l2norm * integral / (TWO_PI * n * h_y * h_w)
            + c_w * h_w.powi(4)
            + c_y * h_y.powi(4)
            + c_wy * h_w * h_w * h_y * h_y
    };
    let scale = n.powf(-1.0 / 6.0);
    let search = |w_grid: &[f64], y_grid: &[f64]| -> Option<(usize, usize, f64)> {
        let integrals: Vec<f64> = w_grid.iter().map(|&hw| var_integral(hw)).collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for (iw, &hw) in w_grid.iter().enumerate() {
            for (iy, &hy) in y_grid.iter().enumerate() {
                let v = objective(hw, hy, integrals[iw]);
                if v.is_finite() && best.is_none_or(|(_, _, bv)| v < bv) {
                    best = Some((iw, iy, v));
                }
            }
        }
        best
    };
    let w_grid = log_spaced(0.05 * sigma_x * scale, 2.0 * sigma_x * scale, 32);
    let y_grid = log_spaced(0.05 * sigma_y * scale, 2.0 * sigma_y * scale, 32);
    let (iw, iy, coarse_val) = search(&w_grid, &y_grid).ok_or(NumericError::NoFiniteCandidate)?;
    // Refinement: one log-grid step on each side, halved spacing. The
    // coarse argmin itself stays in contention in case the refined grid
    // misses it.
    let refine = |grid: &[f64], i: usize| -> Vec<f64> {
        let lo = grid[i.saturating_sub(1)];
        let hi = grid[(i + 1).min(grid.len() - 1)];
        log_spaced(lo, hi, 32)
    };
    let w2 = refine(&w_grid, iw);
    let y2 = refine(&y_grid, iy);
    let (jw, jy, fine_val) = search(&w2, &y2).ok_or(NumericError::NoFiniteCandidate)?;
    if fine_val <= coarse_val {
        Ok((w2[jw], y2[jy]))
    } else {
        Ok((w_grid[iw], y_grid[iy]))
    }
}

/// SIMEX pilot: adds one and two extra layers of resampled error, picks a
/// CV bandwidth for each, and extrapolates back as `(h**)^2 / h*`.
pub fn simex_pilot(
    sample: &PrimarySample,
    aux: &[f64],
    model: &ErrorModel,
    params: &TuningParams,
    tau0: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    assert!(params.d_reps >= 1);
    if aux.is_empty() {
        return Err(NumericError::InvalidInput(
            "SIMEX needs auxiliary error draws".into(),
        ));
    }
    let n = sample.len();
    let h_grid = params
        .h_grid
        .clone()
        .unwrap_or_else(|| default_h_grid(sample.w()));
    // Boundary weight: Gaussian KDE of W at the rule-of-thumb bandwidth.
    let sd_w = sample_variance(sample.w()).sqrt();
    let h_kde = 1.06 * sd_w * (n as f64).powf(-0.2);
    let kde = |x: f64| -> f64 {
        let norm = 1.0 / ((n as f64) * h_kde * (TWO_PI).sqrt());
        sample
            .w()
            .iter()
            .map(|&wi| (-0.5 * ((x - wi) / h_kde).powi(2)).exp())
            .sum::<f64>()
            * norm
    };
    let folds = fold_indices(n, params.j_folds, params.seed);
    let mut cv_star = vec![0.0f64; h_grid.len()];
    let mut cv_star2 = vec![0.0f64; h_grid.len()];
    for d in 1..=params.d_reps {
        let mut rng = stream(params.seed, tag::SIMEX, d as u64);
        let resample = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
            (0..n).map(|_| aux[rng.gen_range(0..aux.len())]).collect()
        };
        let u_star = resample(&mut rng);
        let u_star2 = resample(&mut rng);
        let w_star: Vec<f64> = sample.w().iter().zip(&u_star).map(|(&w, &u)| w + u).collect();
        let w_star2: Vec<f64> = w_star.iter().zip(&u_star2).map(|(&w, &u)| w + u).collect();
        for (hi, &h) in h_grid.iter().enumerate() {
            cv_star[hi] += simex_cv(
                sample, model, &w_star, sample.w(), h, tau0, &folds, &kde, quad,
            )?;
            cv_star2[hi] += simex_cv(
                sample, model, &w_star2, &w_star, h, tau0, &folds, &kde, quad,
            )?;
        }
    }
    let argmin = |vals: &[f64]| -> Result<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (&h, &v) in h_grid.iter().zip(vals) {
            if v.is_finite() {
                match best {
                    None => best = Some((h, v)),
                    Some((_, bv)) if v < bv => best = Some((h, v)),
                    _ => {}
                }
            }
        }
        best.map(|(h, _)| h).ok_or(NumericError::NoFiniteCandidate)
    };
    let h_star = argmin(&cv_star)?;
    let h_star2 = argmin(&cv_star2)?;
    Ok(h_star2 * h_star2 / h_star)
}

/// One SIMEX cross-validation sum: fit on `(w_fit, Y)` without each fold,
/// evaluate the check loss at the fold's `w_eval` points.
#[allow(clippy::too_many_arguments)]
fn simex_cv<F: Fn(f64) -> f64>(
    sample: &PrimarySample,
    model: &ErrorModel,
    w_fit: &[f64],
    w_eval: &[f64],
    h: f64,
    tau0: f64,
    folds: &[Vec<usize>],
    weight_fn: &F,
    quad: &QuadratureRule,
) -> Result<f64> {
    let n = sample.len();
    let kernel = DeconvKernel::new(model, h, quad)?;
    let mut total = 0.0;
    for fold in folds {
        let mut in_fold = vec![false; n];
        for &i in fold {
            in_fold[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
        if train.len() < 2 {
            continue;
        }
        let train_y: Vec<f64> = train.iter().map(|&i| sample.y()[i]).collect();
        let train_w: Vec<f64> = train.iter().map(|&i| w_fit[i]).collect();
        let train_sample = PrimarySample::new(train_w.clone(), train_y)?;
        let eval_pts: Vec<f64> = fold.iter().map(|&i| w_eval[i]).collect();
        let weights = kernel.weight_matrix(&eval_pts, &train_w)?;
        for (g, &i) in fold.iter().enumerate() {
            match fit_point(weights.row(g), &train_sample, tau0) {
                Ok(theta) => {
                    total += check_loss(tau0, sample.y()[i] - theta) * weight_fn(w_eval[i]);
                }
                Err(NumericError::DegenerateWeights { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(total)
}

/// Run the full selection pipeline and assemble a plan.
#[allow(clippy::too_many_arguments)]
pub fn select_plan(
    sample: &PrimarySample,
    aux: &[f64],
    model: &ErrorModel,
    params: &TuningParams,
    tau0: f64,
    grid: &EvalGrid,
    quad: &QuadratureRule,
    use_simex: bool,
) -> Result<BandwidthPlan> {
    let moments = crate::deconv::kernel_moments(quad);
    let b = weight_bandwidth_b(sample.w(), model, &moments, quad)?;
    let (h_opt, provenance) = if use_simex {
        (
            simex_pilot(sample, aux, model, params, tau0, quad)?,
            Provenance::Simex,
        )
    } else {
        (
            cv_pilot(sample, model, params, tau0, b, quad)?,
            Provenance::CvPilot,
        )
    };
    let (h, k) = undersmooth(sample, model, h_opt, params, grid, quad)?;
    let (h_w, h_y) = amise_hw_hy(sample, model, &moments, quad)?;
    Ok(BandwidthPlan {
        h,
        h_opt,
        h_w,
        h_y,
        b,
        provenance,
        undersmooth_k: k,
        undersmooth_l: params.l_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deconv::kernel_moments;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn quad() -> QuadratureRule {
        QuadratureRule::default_rule()
    }

    #[test]
    fn check_loss_values() {
        assert_abs_diff_eq!(check_loss(0.5, 2.0), 1.0);
        assert_abs_diff_eq!(check_loss(0.5, -2.0), 1.0);
        assert_abs_diff_eq!(check_loss(0.25, -4.0), 3.0);
        assert!(check_loss(0.3, 0.0) == 0.0);
    }

    fn toy_sample(seed: u64, n: usize, b: f64) -> (PrimarySample, Vec<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let laplace = |rng: &mut ChaCha12Rng| -> f64 {
            let v: f64 = rng.gen_range(-0.5..0.5);
            -b * v.signum() * (1.0 - 2.0 * v.abs()).ln()
        };
        let mut w = Vec::new();
        let mut y = Vec::new();
        let mut aux = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let u = laplace(&mut rng);
            w.push(x + u);
            y.push(x + e);
            aux.push(laplace(&mut rng));
        }
        (PrimarySample::new(w, y).unwrap(), aux)
    }

    #[test]
    fn weight_bandwidth_matches_grid_scan() {
        let q = quad();
        let (s, aux) = toy_sample(17, 120, 0.354);
        let model = ErrorModel::empirical(aux).unwrap();
        let moments = kernel_moments(&q);
        let b = weight_bandwidth_b(s.w(), &model, &moments, &q).unwrap();
        // Independent grid scan with the same surrogate.
        let n = s.w().len() as f64;
        let sigma_x2 = (sample_variance(s.w()) - model.error_variance()).max(1e-6);
        let sigma_x = sigma_x2.sqrt();
        let grid = log_spaced(0.05 * sigma_x, 5.0 * sigma_x, 64);
        let bias_const = moments.kappa21 * moments.kappa21 / 4.0 * 3.0
            / (8.0 * std::f64::consts::PI.sqrt() * sigma_x.powi(5));
        let floor = model.clamp_floor();
        let mut best = (f64::NAN, f64::INFINITY);
        for &cand in &grid {
            let integral = q.integrate(|t| {
                let d = model.charfn(t / cand).norm().max(floor);
                fourier_kernel(t).powi(2) / (d * d)
            });
            let v = integral / (TWO_PI * n * cand) + bias_const * cand.powi(4);
            if v < best.1 {
                best = (cand, v);
            }
        }
        assert_eq!(b, best.0);
    }

    #[test]
    fn weight_bandwidth_grows_with_error_scale() {
        // Same latent X, error scale doubled consistently in both W and
        // the aux sample, so the signal variance estimate stays put and
        // only the characteristic-function decay changes.
        let q = quad();
        let moments = kernel_moments(&q);
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let laplace = |rng: &mut ChaCha12Rng| -> f64 {
            let v: f64 = rng.gen_range(-0.5..0.5);
            -0.354 * v.signum() * (1.0 - 2.0 * v.abs()).ln()
        };
        let n = 150;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let u: Vec<f64> = (0..n).map(|_| laplace(&mut rng)).collect();
        let aux: Vec<f64> = (0..n).map(|_| laplace(&mut rng)).collect();
        let w_small: Vec<f64> = x.iter().zip(&u).map(|(&a, &b)| a + b).collect();
        let w_big: Vec<f64> = x.iter().zip(&u).map(|(&a, &b)| a + 2.0 * b).collect();
        let small = ErrorModel::empirical(aux.clone()).unwrap();
        let big = ErrorModel::empirical(aux.iter().map(|u| 2.0 * u).collect()).unwrap();
        let b_small = weight_bandwidth_b(&w_small, &small, &moments, &q).unwrap();
        let b_big = weight_bandwidth_b(&w_big, &big, &moments, &q).unwrap();
        assert!(b_big > b_small, "{b_big} <= {b_small}");
    }

    #[test]
    fn folds_partition_and_are_seeded() {
        let folds = fold_indices(23, 5, 7);
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flatten().cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(fold_indices(23, 5, 7), folds);
        assert_ne!(fold_indices(23, 5, 8), folds);
        // Sizes differ by at most one.
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn cv_pilot_returns_grid_element_with_positive_criterion() {
        let q = quad();
        let (s, aux) = toy_sample(5, 60, 0.354);
        let model = ErrorModel::empirical(aux).unwrap();
        let moments = kernel_moments(&q);
        let b = weight_bandwidth_b(s.w(), &model, &moments, &q).unwrap();
        let params = TuningParams {
            h_grid: Some(log_spaced(0.2, 1.0, 8)),
            ..Default::default()
        };
        let h = cv_pilot(&s, &model, &params, 0.5, b, &q).unwrap();
        assert!(params.h_grid.as_ref().unwrap().contains(&h));
        // Criterion values are nonnegative on every candidate.
        let lo = s.w().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.w().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let x_nodes = linspace(lo, hi, 64);
        let kernel_b = DeconvKernel::new(&model, b, &q).unwrap();
        let weight_b = kernel_b.weight_matrix(&x_nodes, s.w()).unwrap();
        let folds = fold_indices(s.len(), params.j_folds, params.seed);
        for &cand in params.h_grid.as_ref().unwrap() {
            let cv =
                cv_criterion(&s, &model, cand, 0.5, &folds, &x_nodes, &weight_b, &q).unwrap();
            assert!(cv >= 0.0);
        }
    }

    #[test]
    fn leave_one_out_cv_matches_direct_implementation() {
        let q = quad();
        let (s, aux) = toy_sample(13, 30, 0.354);
        let model = ErrorModel::empirical(aux).unwrap();
        let tau0 = 0.5;
        let b = 0.4;
        let h = 0.6;
        let lo = s.w().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.w().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let x_nodes = linspace(lo, hi, 64);
        let kernel_b = DeconvKernel::new(&model, b, &q).unwrap();
        let weight_b = kernel_b.weight_matrix(&x_nodes, s.w()).unwrap();
        let folds = fold_indices(s.len(), s.len(), 3); // J = n: leave-one-out
        let fast = cv_criterion(&s, &model, h, tau0, &folds, &x_nodes, &weight_b, &q).unwrap();
        // Direct leave-one-out evaluation.
        let dx = x_nodes[1] - x_nodes[0];
        let tw = trapezoid_weights(x_nodes.len());
        let kernel_h = DeconvKernel::new(&model, h, &q).unwrap();
        let mut total = 0.0;
        for i in 0..s.len() {
            let train: Vec<usize> = (0..s.len()).filter(|&j| j != i).collect();
            let ts = s.subset(&train).unwrap();
            let mut integral = 0.0;
            for (g, &xg) in x_nodes.iter().enumerate() {
                let wts: Vec<f64> = train
                    .iter()
                    .map(|&j| kernel_h.eval(xg - s.w()[j]).unwrap())
                    .collect();
                let theta = fit_point(&wts, &ts, tau0).unwrap();
                integral +=
                    tw[g] * check_loss(tau0, s.y()[i] - theta) * kernel_b.eval(xg - s.w()[i]).unwrap() * dx;
            }
            total += integral;
        }
        total /= s.len() as f64;
        assert_abs_diff_eq!(fast, total, epsilon = 1e-8 * (1.0 + total.abs()));
    }

    #[test]
    fn undersmooth_flat_differences_floor() {
        // Constant response: every fit is identical, the kink condition
        // never holds, so k = 1 and the (log n)^-1 floor applies.
        let q = quad();
        let n = 40;
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = PrimarySample::new(w, vec![1.0; n]).unwrap();
        let model = ErrorModel::no_error();
        let params = TuningParams::default();
        let grid = EvalGrid::equispaced(-0.8, 0.8, 9, 0.4, 0.6, 3).unwrap();
        let h_opt = 0.5;
        let (h, k) = undersmooth(&s, &model, h_opt, &params, &grid, &q).unwrap();
        assert_eq!(k, 1);
        let h_over = params.zeta * h_opt;
        let expect = (1.0 / params.l_steps as f64).max(1.0 / (n as f64).ln()) * h_over;
        assert_abs_diff_eq!(h, expect, epsilon = 1e-12);
        // Bounds from the rule.
        assert!(h <= params.zeta * h_opt + 1e-12);
        assert!(h >= (1.0 / (n as f64).ln()) * params.zeta * h_opt - 1e-12);
    }

    #[test]
    fn undersmooth_matches_direct_scan() {
        let q = quad();
        let (s, aux) = toy_sample(41, 80, 0.354);
        let model = ErrorModel::empirical(aux).unwrap();
        let params = TuningParams {
            l_steps: 8,
            ..Default::default()
        };
        let grid = EvalGrid::equispaced(-0.8, 0.8, 9, 0.4, 0.6, 3).unwrap();
        let h_opt = 0.6;
        let (h, k) = undersmooth(&s, &model, h_opt, &params, &grid, &q).unwrap();
        // Independent scan over all k.
        let l = params.l_steps;
        let h_over = params.zeta * h_opt;
        let fits: Vec<_> = (1..=l)
            .map(|step| {
                crate::estimator::fit_grid(&s, &model, step as f64 / l as f64 * h_over, &grid, &q)
                    .unwrap()
            })
            .collect();
        let sup = |a: &crate::estimator::QuantileGridFit, b: &crate::estimator::QuantileGridFit| {
            let mut m = 0.0f64;
            for j in 0..grid.x_points().len() {
                for kk in 0..grid.tau_points().len() {
                    if a.is_valid(j, kk) && b.is_valid(j, kk) {
                        m = m.max((a.theta_hat.get(j, kk) - b.theta_hat.get(j, kk)).abs());
                    }
                }
            }
            m
        };
        let diffs: Vec<f64> = (1..l).map(|i| sup(&fits[i], &fits[i - 1])).collect();
        let last = diffs[l - 2];
        let mut expect_k = 1;
        for cand in (2..=l).rev() {
            if diffs[cand - 2] > params.rho * last {
                expect_k = cand;
                break;
            }
        }
        assert_eq!(k, expect_k);
        let n = s.len() as f64;
        let expect_h = (expect_k as f64 / l as f64).max(1.0 / n.ln()) * h_over;
        assert_abs_diff_eq!(h, expect_h, epsilon = 1e-12);
    }

    #[test]
    fn amise_hand_moments_and_grid_certificate() {
        let q = quad();
        // Hand dataset of 6 points.
        let w = vec![0.0, 1.0, 2.0, -1.0, 0.5, -0.5];
        let y = vec![0.2, 1.1, 1.9, -0.8, 0.6, -0.4];
        let s = PrimarySample::new(w.clone(), y.clone()).unwrap();
        let aux = vec![0.1, -0.1, 0.05, -0.05];
        let model = ErrorModel::empirical(aux.clone()).unwrap();
        // Spreadsheet-style plug-in moments.
        let var_w = sample_variance(&w);
        let var_y = sample_variance(&y);
        let var_u = sample_variance(&aux);
        let sigma_x = (var_w - var_u).sqrt();
        let mw = w.iter().sum::<f64>() / 6.0;
        let my = y.iter().sum::<f64>() / 6.0;
        let cov: f64 = w
            .iter()
            .zip(&y)
            .map(|(&a, &b)| (a - mw) * (b - my))
            .sum::<f64>()
            / 5.0;
        // The implied correlation exceeds 1 here (W and Y are nearly
        // collinear and sigma_X < sigma_W), exercising the clamp.
        let rho = (cov / (var_y.sqrt() * sigma_x)).clamp(-0.99, 0.99);
        assert_abs_diff_eq!(rho, 0.99);
        let moments = kernel_moments(&q);
        let (h_w, h_y) = amise_hw_hy(&s, &model, &moments, &q).unwrap();
        assert!(h_w > 0.0 && h_y > 0.0 && h_w.is_finite() && h_y.is_finite());
        // Certificate: returned point no worse than every coarse grid point.
        let n = 6.0f64;
        let scale = n.powf(-1.0 / 6.0);
        let floor = model.clamp_floor();
        let obj = |hw: f64, hy: f64| -> f64 {
            let integral = q.integrate(|t| {
                let d = model.charfn(t / hw).norm().max(floor);
                fourier_kernel(t).powi(2) / (d * d)
            });
            let one_m = (1.0 - rho * rho).powf(2.5);
            let k2 = moments.kappa21 * moments.kappa21;
            let pi = std::f64::consts::PI;
            moments.l2norm * integral / (TWO_PI * n * hy * hw)
                + 3.0 * k2 / (64.0 * pi * one_m * sigma_x.powi(5) * var_y.sqrt()) * hw.powi(4)
                + 3.0 * k2 / (64.0 * pi * one_m * var_y.sqrt().powi(5) * sigma_x) * hy.powi(4)
                + (1.0 + 2.0 * rho * rho) * k2
                    / (32.0 * pi * one_m * sigma_x.powi(3) * var_y.sqrt().powi(3))
                    * hw * hw * hy * hy
        };
        let at_min = obj(h_w, h_y);
        for &hw in &log_spaced(0.05 * sigma_x * scale, 2.0 * sigma_x * scale, 32) {
            for &hy in &log_spaced(0.05 * var_y.sqrt() * scale, 2.0 * var_y.sqrt() * scale, 32) {
                assert!(at_min <= obj(hw, hy) + 1e-12);
            }
        }
    }

    #[test]
    fn amise_rejects_dominant_error_variance() {
        let q = quad();
        let w = vec![0.1, -0.1, 0.05, -0.05, 0.0, 0.02];
        let y = vec![0.2, 1.1, 1.9, -0.8, 0.6, -0.4];
        let s = PrimarySample::new(w, y).unwrap();
        let model = ErrorModel::gaussian(5.0);
        let moments = kernel_moments(&q);
        assert!(matches!(
            amise_hw_hy(&s, &model, &moments, &q),
            Err(NumericError::NegativeSignalVariance)
        ));
    }

    #[test]
    fn simex_extrapolation_identity() {
        // (h**)^2 / h* with stubbed minimizers.
        let h_star = 0.2;
        let h_star2 = 0.3;
        assert_abs_diff_eq!(h_star2 * h_star2 / h_star, 0.45, epsilon = 1e-15);
    }

    #[test]
    fn simex_deterministic_and_matches_single_replicate() {
        let q = quad();
        let (s, aux) = toy_sample(55, 40, 0.354);
        let model = ErrorModel::empirical(aux.clone()).unwrap();
        let params = TuningParams {
            d_reps: 1,
            h_grid: Some(log_spaced(0.3, 1.0, 4)),
            seed: 9,
            ..Default::default()
        };
        let a = simex_pilot(&s, &aux, &model, &params, 0.5, &q).unwrap();
        let b = simex_pilot(&s, &aux, &model, &params, 0.5, &q).unwrap();
        assert_eq!(a, b);
        // Direct single-replicate recomputation.
        let n = s.len();
        let mut rng = stream(params.seed, tag::SIMEX, 1);
        let resample = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..n).map(|_| aux[rng.gen_range(0..aux.len())]).collect()
        };
        let u_star = resample(&mut rng);
        let u_star2 = resample(&mut rng);
        let w_star: Vec<f64> = s.w().iter().zip(&u_star).map(|(&w, &u)| w + u).collect();
        let w_star2: Vec<f64> = w_star.iter().zip(&u_star2).map(|(&w, &u)| w + u).collect();
        let sd_w = sample_variance(s.w()).sqrt();
        let h_kde = 1.06 * sd_w * (n as f64).powf(-0.2);
        let kde = |x: f64| -> f64 {
            s.w()
                .iter()
                .map(|&wi| (-0.5 * ((x - wi) / h_kde).powi(2)).exp())
                .sum::<f64>()
                / ((n as f64) * h_kde * TWO_PI.sqrt())
        };
        let folds = fold_indices(n, params.j_folds, params.seed);
        let grid = params.h_grid.as_ref().unwrap();
        let mut best1 = (f64::NAN, f64::INFINITY);
        let mut best2 = (f64::NAN, f64::INFINITY);
        for &h in grid {
            let v1 = simex_cv(&s, &model, &w_star, s.w(), h, 0.5, &folds, &kde, &q).unwrap();
            if v1 < best1.1 {
                best1 = (h, v1);
            }
            let v2 = simex_cv(&s, &model, &w_star2, &w_star, h, 0.5, &folds, &kde, &q).unwrap();
            if v2 < best2.1 {
                best2 = (h, v2);
            }
        }
        assert_eq!(a, best2.0 * best2.0 / best1.0);
    }

    #[test]
    fn select_plan_yields_positive_bandwidths() {
        let q = quad();
        let (s, aux) = toy_sample(3, 60, 0.354);
        let model = ErrorModel::empirical(aux.clone()).unwrap();
        let params = TuningParams {
            h_grid: Some(log_spaced(0.25, 0.9, 6)),
            l_steps: 6,
            ..Default::default()
        };
        let grid = EvalGrid::equispaced(-0.8, 0.8, 7, 0.4, 0.6, 3).unwrap();
        let plan = select_plan(&s, &aux, &model, &params, 0.5, &grid, &q, false).unwrap();
        for v in [plan.h, plan.h_opt, plan.h_w, plan.h_y, plan.b] {
            assert!(v > 0.0 && v.is_finite());
        }
        assert!(plan.h <= params.zeta * plan.h_opt + 1e-12);
        assert_eq!(plan.provenance, Provenance::CvPilot);
    }
}
