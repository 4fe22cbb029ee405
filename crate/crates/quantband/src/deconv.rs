//! Characteristic functions, the base kernel `K`, and the (estimated)
//! deconvolution kernel evaluated by Fourier-inversion quadrature.
//!
//! The kernel is fixed to the second-order choice with characteristic
//! function `phi_K(t) = (1 - t^2)^3` on `[-1, 1]`. The deconvolution kernel
//!
//! ```text
//! K_{U,h}(x) = (2 pi h)^-1 int exp(-i t x / h) phi_K(t) / phi_U(t/h) dt
//! ```
//!
//! divides by the error characteristic function, which for an empirical
//! model is the sample characteristic function of the auxiliary draws. The
//! integrand is independent of `x` except for the complex exponential, so
//! per-node coefficients are cached once per `(model, h)` and each
//! evaluation costs one exponential per node.

use crate::matrix::Matrix;
use crate::quad::{QuadratureRule, OSCILLATION_LIMIT};
use crate::{NumericError, Result};
use num_complex::Complex64;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Relative tolerance on the imaginary residual of the inversion integral.
pub const IMAG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum ErrorKind {
    /// Laplace(0, b): variance `2 b^2`, characteristic function `1/(1 + b^2 t^2)`.
    KnownLaplace { scale: f64 },
    /// Centered Gaussian with standard deviation `sd`.
    KnownGaussian { sd: f64 },
    /// Sample characteristic function of auxiliary error draws.
    Empirical { aux: Vec<f64> },
}

/// Decay class of the error characteristic function. Metadata only; used by
/// rate sanity tests, never by the estimator itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothnessTag {
    OrdinarySmooth { order: f64 },
    Supersmooth { order: f64, order0: f64 },
}

/// The measurement-error model: a characteristic function plus the
/// denominator clamping policy used inside the deconvolution integral.
#[derive(Debug)]
pub struct ErrorModel {
    kind: ErrorKind,
    clamp_floor: f64,
    smoothness_tag: Option<SmoothnessTag>,
    clamp_count: AtomicU64,
}

impl Clone for ErrorModel {
    fn clone(&self) -> Self {
        ErrorModel {
            kind: self.kind.clone(),
            clamp_floor: self.clamp_floor,
            smoothness_tag: self.smoothness_tag,
            clamp_count: AtomicU64::new(self.clamp_count.load(Ordering::Relaxed)),
        }
    }
}

impl ErrorModel {
    pub fn laplace(scale: f64) -> Self {
        assert!(scale > 0.0);
        ErrorModel {
            kind: ErrorKind::KnownLaplace { scale },
            clamp_floor: 0.0,
            smoothness_tag: Some(SmoothnessTag::OrdinarySmooth { order: 2.0 }),
            clamp_count: AtomicU64::new(0),
        }
    }

    pub fn gaussian(sd: f64) -> Self {
        assert!(sd > 0.0);
        ErrorModel {
            kind: ErrorKind::KnownGaussian { sd },
            clamp_floor: 0.0,
            smoothness_tag: Some(SmoothnessTag::Supersmooth {
                order: 2.0,
                order0: 0.0,
            }),
            clamp_count: AtomicU64::new(0),
        }
    }

    /// Empirical model from auxiliary error draws; the default denominator
    /// floor is `m^(-1/2)`.
    pub fn empirical(aux: Vec<f64>) -> Result<Self> {
        if aux.len() < 2 {
            return Err(NumericError::InvalidInput(format!(
                "empirical error model needs m >= 2 auxiliary draws, got {}",
                aux.len()
            )));
        }
        if aux.iter().any(|u| !u.is_finite()) {
            return Err(NumericError::InvalidInput(
                "non-finite auxiliary draw".into(),
            ));
        }
        let floor = (aux.len() as f64).powf(-0.5);
        Ok(ErrorModel {
            kind: ErrorKind::Empirical { aux },
            clamp_floor: floor,
            smoothness_tag: None,
            clamp_count: AtomicU64::new(0),
        })
    }

    /// Degenerate empirical model with `phi_U == 1`; only for analytic
    /// no-error reduction checks, where the `m >= 2` requirement is relaxed.
    pub fn no_error() -> Self {
        ErrorModel {
            kind: ErrorKind::Empirical { aux: vec![0.0] },
            clamp_floor: 0.0,
            smoothness_tag: None,
            clamp_count: AtomicU64::new(0),
        }
    }

    pub fn with_clamp_floor(mut self, floor: f64) -> Self {
        assert!(floor >= 0.0);
        self.clamp_floor = floor;
        self
    }

    pub fn with_smoothness_tag(mut self, tag: SmoothnessTag) -> Self {
        self.smoothness_tag = Some(tag);
        self
    }

    pub fn kind(&self) -> &ErrorKind {
        &self.kind
    }

    pub fn clamp_floor(&self) -> f64 {
        self.clamp_floor
    }

    pub fn smoothness_tag(&self) -> Option<SmoothnessTag> {
        self.smoothness_tag
    }

    /// Number of quadrature nodes whose denominator was raised to the floor
    /// since construction.
    pub fn clamped_nodes(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    /// Characteristic function of the error at `t`.
    pub fn charfn(&self, t: f64) -> Complex64 {
        match &self.kind {
            ErrorKind::KnownLaplace { scale } => {
                Complex64::new(1.0 / (1.0 + scale * scale * t * t), 0.0)
            }
            ErrorKind::KnownGaussian { sd } => {
                Complex64::new((-0.5 * sd * sd * t * t).exp(), 0.0)
            }
            ErrorKind::Empirical { aux } => {
                let m = aux.len() as f64;
                let (mut re, mut im) = (0.0, 0.0);
                for &u in aux {
                    let (s, c) = (t * u).sin_cos();
                    re += c;
                    im += s;
                }
                Complex64::new(re / m, im / m)
            }
        }
    }

    /// Variance of the error law: exact for the known forms, sample variance
    /// of the auxiliary draws for the empirical model.
    pub fn error_variance(&self) -> f64 {
        match &self.kind {
            ErrorKind::KnownLaplace { scale } => 2.0 * scale * scale,
            ErrorKind::KnownGaussian { sd } => sd * sd,
            ErrorKind::Empirical { aux } => sample_variance(aux),
        }
    }
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
}

/// `phi_K(t) = (1 - t^2)^3` on `[-1, 1]`, zero outside.
pub fn fourier_kernel(t: f64) -> f64 {
    if t.abs() <= 1.0 {
        let u = 1.0 - t * t;
        u * u * u
    } else {
        0.0
    }
}

/// The base kernel `K(x) = (2 pi)^-1 int cos(t x) phi_K(t) dt`.
pub fn base_kernel(x: f64, quad: &QuadratureRule) -> f64 {
    quad.integrate(|t| (t * x).cos() * fourier_kernel(t)) / TWO_PI
}

/// `kappa21 = int x^2 K(x) dx` and `l2norm = int K(x)^2 dx`.
#[derive(Debug, Clone, Copy)]
pub struct KernelMoments {
    pub kappa21: f64,
    pub l2norm: f64,
}

pub fn kernel_moments(quad: &QuadratureRule) -> KernelMoments {
    // kappa21 = -phi_K''(0), by the Fourier moment identity.
    let step = 1e-4;
    let dd = (fourier_kernel(step) - 2.0 * fourier_kernel(0.0) + fourier_kernel(-step))
        / (step * step);
    let l2norm = quad.integrate(|t| fourier_kernel(t).powi(2)) / TWO_PI;
    KernelMoments {
        kappa21: -dd,
        l2norm,
    }
}

/// Per-node coefficients of the deconvolution integral for a fixed
/// `(model, h)`, so that `K_{U,h}(x) = Re sum_k c_k exp(-i t_k x / h)`.
struct NodeCoeffs {
    scaled_nodes: Vec<f64>, // t_k / h
    coeffs: Vec<Complex64>, // w_k phi_K(t_k) / phi_U(t_k/h) / (2 pi h)
}

impl NodeCoeffs {
    fn build(model: &ErrorModel, h: f64, rule: &QuadratureRule, clamp: bool) -> Result<Self> {
        let mut scaled_nodes = Vec::with_capacity(rule.order());
        let mut coeffs = Vec::with_capacity(rule.order());
        let floor = if clamp { model.clamp_floor } else { 0.0 };
        let mut clamped = 0u64;
        for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
            let mut denom = model.charfn(t / h);
            let mag = denom.norm();
            if mag < floor {
                // Raise the magnitude to the floor, preserving the phase.
                denom *= floor / mag;
                clamped += 1;
            }
            let c = w * fourier_kernel(t) / denom / (TWO_PI * h);
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(NumericError::NonFiniteResult { h });
            }
            scaled_nodes.push(t / h);
            coeffs.push(c);
        }
        if clamped > 0 {
            model.clamp_count.fetch_add(clamped, Ordering::Relaxed);
        }
        Ok(NodeCoeffs {
            scaled_nodes,
            coeffs,
        })
    }

    /// Complex value of the inversion integral at `x`.
    fn eval(&self, x: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (&tk, &c) in self.scaled_nodes.iter().zip(&self.coeffs) {
            let (s, co) = (tk * x).sin_cos();
            // exp(-i t x) = cos(tx) - i sin(tx)
            acc += c * Complex64::new(co, -s);
        }
        acc
    }
}

/// The deconvolution kernel for a fixed `(model, h)`, reusable across
/// evaluation points.
pub struct DeconvKernel<'a> {
    model: &'a ErrorModel,
    h: f64,
    quad: &'a QuadratureRule,
    base: NodeCoeffs,
    doubled: OnceLock<NodeCoeffs>,
    clamp: bool,
}

impl<'a> DeconvKernel<'a> {
    pub fn new(model: &'a ErrorModel, h: f64, quad: &'a QuadratureRule) -> Result<Self> {
        Self::with_clamping(model, h, quad, true)
    }

    /// `clamp = false` bypasses the denominator floor; used by the
    /// real-valuedness diagnostics.
    pub fn with_clamping(
        model: &'a ErrorModel,
        h: f64,
        quad: &'a QuadratureRule,
        clamp: bool,
    ) -> Result<Self> {
        assert!(h > 0.0, "bandwidth must be positive");
        let base = NodeCoeffs::build(model, h, quad, clamp)?;
        Ok(DeconvKernel {
            model,
            h,
            quad,
            base,
            doubled: OnceLock::new(),
            clamp,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    fn coeffs_for(&self, x: f64) -> Result<&NodeCoeffs> {
        if (x / self.h).abs() <= OSCILLATION_LIMIT {
            Ok(&self.base)
        } else {
            // The base rule cannot resolve frequencies this high; switch to
            // the doubled rule for this evaluation.
            if self.doubled.get().is_none() {
                let built =
                    NodeCoeffs::build(self.model, self.h, self.quad.doubled(), self.clamp)?;
                let _ = self.doubled.set(built);
            }
            Ok(self.doubled.get().unwrap())
        }
    }

    /// Real and imaginary parts of the quadrature approximation at `x`,
    /// without the real-valuedness assertion.
    pub fn eval_components(&self, x: f64) -> Result<(f64, f64)> {
        let v = self.coeffs_for(x)?.eval(x);
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(NumericError::NonFiniteResult { h: self.h });
        }
        Ok((v.re, v.im))
    }

    /// `K_{U,h}(x)`: the real part, asserting the imaginary residual is
    /// negligible (the integral is exactly real for symmetric `phi_K`).
    pub fn eval(&self, x: f64) -> Result<f64> {
        let (re, im) = self.eval_components(x)?;
        assert!(
            im.abs() <= IMAG_TOL * (1.0 + re.abs()),
            "imaginary residual {im:e} exceeds tolerance at x = {x}"
        );
        Ok(re)
    }

    /// Weight matrix `(j, i) -> K_{U,h}(x_j - w_i)` via the separable
    /// factorization `exp(-i t (x - w)/h) = exp(-i t x/h) exp(i t w/h)`,
    /// which shares the per-point exponentials across the whole grid.
    /// Agrees with pointwise evaluation to ~1e-15 relative.
    pub fn weight_matrix(&self, xs: &[f64], ws: &[f64]) -> Result<Matrix> {
        let order = self.base.scaled_nodes.len();
        let mut x_phase: Vec<Complex64> = Vec::with_capacity(xs.len() * order);
        for &x in xs {
            for &tk in &self.base.scaled_nodes {
                let (s, c) = (tk * x).sin_cos();
                x_phase.push(Complex64::new(c, -s));
            }
        }
        let mut w_phase: Vec<Complex64> = Vec::with_capacity(ws.len() * order);
        for &w in ws {
            for &tk in &self.base.scaled_nodes {
                let (s, c) = (tk * w).sin_cos();
                w_phase.push(Complex64::new(c, s));
            }
        }
        let mut out = Matrix::zeros(xs.len(), ws.len());
        for (j, &x) in xs.iter().enumerate() {
            let xp = &x_phase[j * order..(j + 1) * order];
            for (i, &w) in ws.iter().enumerate() {
                if ((x - w) / self.h).abs() > OSCILLATION_LIMIT {
                    out.set(j, i, self.eval(x - w)?);
                    continue;
                }
                let wp = &w_phase[i * order..(i + 1) * order];
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..order {
                    acc += self.base.coeffs[k] * xp[k] * wp[k];
                }
                if !acc.re.is_finite() {
                    return Err(NumericError::NonFiniteResult { h: self.h });
                }
                assert!(
                    acc.im.abs() <= IMAG_TOL * (1.0 + acc.re.abs()),
                    "imaginary residual {:e} exceeds tolerance",
                    acc.im
                );
                out.set(j, i, acc.re);
            }
        }
        Ok(out)
    }
}

/// One-off evaluation of the deconvolution kernel.
pub fn deconv_kernel(model: &ErrorModel, h: f64, x: f64, quad: &QuadratureRule) -> Result<f64> {
    DeconvKernel::new(model, h, quad)?.eval(x)
}

/// `K_{U,h}(x - w_i)` for each observation.
pub fn deconv_weights(
    model: &ErrorModel,
    h: f64,
    x: f64,
    w_obs: &[f64],
    quad: &QuadratureRule,
) -> Result<Vec<f64>> {
    let k = DeconvKernel::new(model, h, quad)?;
    w_obs.iter().map(|&w| k.eval(x - w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn quad() -> QuadratureRule {
        QuadratureRule::default_rule()
    }

    #[test]
    fn fourier_kernel_values() {
        assert_eq!(fourier_kernel(0.0), 1.0);
        assert_eq!(fourier_kernel(1.0), 0.0);
        assert_eq!(fourier_kernel(-1.2), 0.0);
        assert_abs_diff_eq!(fourier_kernel(0.5), 0.421875, epsilon = 1e-15);
        assert_eq!(fourier_kernel(0.3), fourier_kernel(-0.3));
    }

    #[test]
    fn base_kernel_at_zero_is_closed_form() {
        // int_{-1}^{1} (1 - t^2)^3 dt = 32/35
        let expect = 16.0 / (35.0 * std::f64::consts::PI);
        assert_abs_diff_eq!(base_kernel(0.0, &quad()), expect, epsilon = 1e-12);
    }

    #[test]
    fn base_kernel_is_even() {
        let q = quad();
        for x in [0.3, 1.7, 3.0, 12.5] {
            assert_eq!(base_kernel(x, &q), base_kernel(-x, &q));
        }
    }

    #[test]
    fn base_kernel_integrates_to_one() {
        let q = quad();
        let step = 0.01;
        let n = (400.0 / step) as usize;
        let mut total = 0.0;
        for i in 0..=n {
            let x = -200.0 + i as f64 * step;
            let f = base_kernel(x, &q);
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * f * step;
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn kernel_moments_match_derived_values() {
        let m = kernel_moments(&quad());
        assert_abs_diff_eq!(m.kappa21, 6.0, epsilon = 1e-6);
        // (1/pi) * 46080/135135
        assert_abs_diff_eq!(
            m.l2norm,
            46080.0 / 135135.0 / std::f64::consts::PI,
            epsilon = 1e-10
        );
    }

    #[test]
    fn first_moment_vanishes_by_symmetry() {
        let q = quad();
        let step = 0.01;
        let n = (100.0 / step) as usize;
        let mut total = 0.0;
        for i in 0..=n {
            let x = -50.0 + i as f64 * step;
            total += x * base_kernel(x, &q) * step;
        }
        assert_abs_diff_eq!(total, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn charfn_known_forms() {
        let lap = ErrorModel::laplace(1.0);
        let v = lap.charfn(1.0);
        assert_eq!(v, Complex64::new(0.5, 0.0));
        let gau = ErrorModel::gaussian(2.0);
        assert_eq!(gau.charfn(0.0), Complex64::new(1.0, 0.0));
        let deg = ErrorModel::no_error();
        assert_eq!(deg.charfn(3.7), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn charfn_at_origin_is_exactly_one() {
        let models = [
            ErrorModel::laplace(0.7),
            ErrorModel::gaussian(1.3),
            ErrorModel::empirical(vec![-1.0, 0.2, 3.0]).unwrap(),
        ];
        for m in &models {
            assert_eq!(m.charfn(0.0), Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn empirical_needs_two_draws() {
        assert!(ErrorModel::empirical(vec![1.0]).is_err());
        assert!(ErrorModel::empirical(vec![1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn charfn_hermitian_symmetry(t in -50.0f64..50.0) {
            let models = [
                ErrorModel::laplace(0.5),
                ErrorModel::gaussian(0.8),
                ErrorModel::empirical(vec![-0.4, 0.1, 1.9, -2.2]).unwrap(),
            ];
            for m in &models {
                let a = m.charfn(t);
                let b = m.charfn(-t);
                prop_assert!((a - b.conj()).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn no_error_model_reduces_to_base_kernel() {
        let q = quad();
        let model = ErrorModel::no_error();
        let h = 0.7;
        for x in [-1.4, 0.0, 0.25, 2.0] {
            let dk = deconv_kernel(&model, h, x, &q).unwrap();
            assert_relative_eq!(dk, base_kernel(x / h, &q) / h, epsilon = 1e-12);
        }
    }

    /// Central-difference second derivative of the base kernel.
    fn base_kernel_dd(x: f64, q: &QuadratureRule) -> f64 {
        let s = 1e-4;
        (base_kernel(x + s, q) - 2.0 * base_kernel(x, q) + base_kernel(x - s, q)) / (s * s)
    }

    #[test]
    fn laplace_closed_form() {
        let q = quad();
        let b = 0.35;
        let h = 0.5;
        let model = ErrorModel::laplace(b);
        for x in [-0.9, 0.0, 0.3, 1.2] {
            let dk = deconv_kernel(&model, h, x, &q).unwrap();
            let oracle =
                (base_kernel(x / h, &q) - (b / h).powi(2) * base_kernel_dd(x / h, &q)) / h;
            assert_relative_eq!(dk, oracle, max_relative = 1e-6);
        }
    }

    #[test]
    fn empirical_imaginary_residual_is_negligible() {
        let q = quad();
        let model = ErrorModel::empirical(vec![-1.0, 0.2, 3.0]).unwrap();
        let k = DeconvKernel::with_clamping(&model, 0.5, &q, false).unwrap();
        let (re, im) = k.eval_components(0.3).unwrap();
        assert!(im.abs() <= 1e-8 * (1.0 + re.abs()));
    }

    #[test]
    fn quadrature_doubling_changes_little_for_laplace() {
        let q256 = QuadratureRule::gauss_legendre(256);
        let q512 = QuadratureRule::gauss_legendre(512);
        let model = ErrorModel::laplace(0.354);
        for &h in &[0.2, 0.5, 1.0] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 4.0] {
                let a = deconv_kernel(&model, h, x, &q256).unwrap();
                let b = deconv_kernel(&model, h, x, &q512).unwrap();
                assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn weight_matrix_matches_pointwise_eval() {
        let q = quad();
        let model = ErrorModel::empirical(vec![-0.5, 0.3, 0.9, -1.7, 0.0]).unwrap();
        let h = 0.4;
        let k = DeconvKernel::new(&model, h, &q).unwrap();
        let xs = [-0.8, 0.0, 0.8];
        let ws = [-1.2, -0.1, 0.6, 2.3];
        let m = k.weight_matrix(&xs, &ws).unwrap();
        for (j, &x) in xs.iter().enumerate() {
            for (i, &w) in ws.iter().enumerate() {
                let direct = k.eval(x - w).unwrap();
                assert!((m.get(j, i) - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn deconv_weights_contract() {
        let q = quad();
        let model = ErrorModel::laplace(0.3);
        let h = 0.6;
        let x = 0.2;
        let w_obs = [x, 1.0, 1.0];
        let wts = deconv_weights(&model, h, x, &w_obs, &q).unwrap();
        assert_eq!(wts.len(), 3);
        assert_eq!(wts[0], deconv_kernel(&model, h, 0.0, &q).unwrap());
        assert_eq!(wts[1], wts[2]);
    }

    #[test]
    fn unbiasedness_transfer_for_laplace() {
        // E[K_{U,h}(x - X - U) | X] = K_h(x - X) for the exact phi_U.
        let q = quad();
        let b = 0.3f64;
        let model = ErrorModel::laplace(b);
        let h = 0.5;
        let x = 0.4;
        let x_true = -0.1;
        let k = DeconvKernel::new(&model, h, &q).unwrap();
        let n = 200_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v: f64 = rng.gen_range(-0.5..0.5);
            let u = -b * v.signum() * (1.0 - 2.0 * v.abs()).ln();
            let val = k.eval(x - x_true - u).unwrap();
            sum += val;
            sumsq += val * val;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        let target = base_kernel((x - x_true) / h, &q) / h;
        assert!(
            (mean - target).abs() <= 3.0 * se,
            "mean {mean} target {target} se {se}"
        );
    }

    #[test]
    fn clamp_counter_increments() {
        // Gaussian-like empirical draws at a small bandwidth force the
        // sample characteristic function below the floor.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let aux: Vec<f64> = (0..100)
            .map(|_| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                g
            })
            .collect();
        let model = ErrorModel::empirical(aux).unwrap();
        let q = quad();
        let _ = deconv_kernel(&model, 0.05, 0.0, &q).unwrap();
        assert!(model.clamped_nodes() > 0);
    }
}
