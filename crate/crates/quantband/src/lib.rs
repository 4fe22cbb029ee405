//! Nonparametric conditional quantile regression under classical measurement
//! error, with multiplier-bootstrap uniform confidence bands.
//!
//! The covariate of interest `X` is observed only through `W = X + U`, where
//! the error `U` has an unknown distribution identified from an auxiliary
//! sample (e.g. half-differences of repeated measurements). Estimation is by
//! a deconvolution-kernel analogue of local constant quantile regression;
//! inference is by a multiplier bootstrap of the standardized supremum over
//! an `(x, tau)` grid.
//!
//! Modules map onto the pipeline stages:
//! - [`quad`]: Gauss-Legendre rules on `[-1, 1]`
//! - [`deconv`]: characteristic functions and the deconvolution kernel
//! - [`estimator`]: the grid estimator of the quantile curve
//! - [`variance`]: the plug-in variance estimator
//! - [`bands`]: bootstrap critical values and band surfaces
//! - [`bandwidth`]: cross-validation pilot, undersmoothing, AMISE, SIMEX
//! - [`sim`]: Monte Carlo coverage harness
//! - [`io`]: CSV/JSON/SVG input and output for the CLI

pub mod bands;
pub mod bandwidth;
pub mod deconv;
pub mod estimator;
pub mod io;
pub mod matrix;
pub mod quad;
pub mod rng;
pub mod sim;
pub mod variance;

/// Numerical failures shared across the estimation modules.
#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    /// A quadrature node produced a non-finite value even after denominator
    /// clamping; usually the bandwidth is too small for an empirical error
    /// model with fast-decaying characteristic function.
    #[error("non-finite value in deconvolution quadrature (h = {h})")]
    NonFiniteResult { h: f64 },
    /// All kernel weights vanished at an evaluation point.
    #[error("degenerate kernel weights at x = {x}")]
    DegenerateWeights { x: f64 },
    /// Every grid cell was invalid, so no supremum statistic exists.
    #[error("all grid cells invalid; cannot form supremum statistics")]
    EmptyGrid,
    /// Every candidate bandwidth produced a non-finite criterion value.
    #[error("no finite candidate in bandwidth search")]
    NoFiniteCandidate,
    /// The implied signal variance var(W) - var(U) is non-positive.
    #[error("measurement error variance exceeds var(W); supply bandwidths manually")]
    NegativeSignalVariance,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;
