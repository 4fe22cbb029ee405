//! Gauss-Legendre quadrature on `[-1, 1]`.
//!
//! The Fourier inversion integrals in this crate all have integrands
//! supported on `[-1, 1]` (the kernel characteristic function vanishes
//! outside), so a single fixed rule discretizes every one of them. The
//! default order is 256; a lazily built rule of twice the order backs
//! evaluations with very oscillatory integrands.

use std::sync::OnceLock;

/// The frequency `|x/h|` beyond which the doubled rule is used.
pub const OSCILLATION_LIMIT: f64 = 60.0;

pub const DEFAULT_ORDER: usize = 256;

#[derive(Debug)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    doubled: OnceLock<Box<QuadratureRule>>,
}

impl QuadratureRule {
    /// Gauss-Legendre rule of the given order, nodes ascending and exactly
    /// symmetric about 0.
    pub fn gauss_legendre(order: usize) -> Self {
        assert!(order >= 2);
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order;
        // Newton iteration from the Chebyshev initial guess; only the lower
        // half is computed, the rest follows by symmetry.
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Legendre recurrence for P_n(x) and P_n'(x).
                let mut p0 = 1.0;
                let mut p1 = x;
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // cos start gives descending nodes; store ascending.
            nodes[i] = -x.abs();
            nodes[n - 1 - i] = x.abs();
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        QuadratureRule {
            nodes,
            weights,
            doubled: OnceLock::new(),
        }
    }

    pub fn default_rule() -> Self {
        Self::gauss_legendre(DEFAULT_ORDER)
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The rule with twice the order, built on first use.
    pub fn doubled(&self) -> &QuadratureRule {
        self.doubled
            .get_or_init(|| Box::new(QuadratureRule::gauss_legendre(2 * self.order())))
    }

    /// Integrate `f` over `[-1, 1]`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}
