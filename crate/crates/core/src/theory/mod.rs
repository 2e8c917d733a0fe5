//! Closed-form predictors and bounds for the excess risk of diffusion
//! learners: the steady-state weighted-variance formula, per-node and tracking
//! bounds, the network MSE recursion bound and the cooperation ordering.
//!
//! Vectors stacked over the network are node-major: coordinates of node `k`
//! occupy rows `k*M .. (k+1)*M`.

mod bounds;
mod kron;
mod noise;
mod steady;

pub use bounds::{
    beta, epsilon_bound, optimal_mu, recursion_bound_trace, simplified_er, stationary_step_limit,
    tracking_bound, tracking_step_limit, RecursionBound, Tagged, TrackingBound,
};
pub use kron::{kron, unvec, vec};
pub use noise::{
    estimate_rv, fit_noise_constants, node_noise_covariance, rv_from_node_covariance, NoiseFit,
    RvEstimate,
};
pub use steady::{
    network_matrix, ordering_check, steady_state_er, steady_state_series, table1_weighting, Method,
    OrderingReport, SteadyState, SteadyStateInputs, Weighting, DENSE_LIMIT,
};

use nalgebra::DMatrix;

use crate::risk::RiskError;

/// Errors raised by the predictors.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TheoryError {
    #[error("B has spectral radius {radius} >= 1; the steady-state predictor does not apply")]
    UnstableB { radius: f64 },
    #[error("node index required for a per-node weighting")]
    MissingNodeIndex,
    #[error("Hessians required for a risk weighting")]
    MissingHessian,
    #[error("no interior optimal step size: {0}")]
    ZeroNoise(&'static str),
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("inconsistent sizes: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// Noise and combination constants entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConstants {
    /// Relative noise coefficient α.
    pub alpha: f64,
    /// Absolute noise floor σ_v².
    pub sigma_v2: f64,
    /// Tr(Q) of the random-walk increments.
    pub q_trace: f64,
    /// ‖C‖₁, the largest absolute column sum of C.
    pub c_norm1: f64,
    /// C_*, the smallest absolute column sum of C.
    pub c_star: f64,
}

impl NoiseConstants {
    /// Constants with ‖C‖₁ and C_* read off `c`.
    pub fn new(alpha: f64, sigma_v2: f64, q_trace: f64, c: &DMatrix<f64>) -> Self {
        let (c_norm1, c_star) = column_norms(c);
        NoiseConstants {
            alpha,
            sigma_v2,
            q_trace,
            c_norm1,
            c_star,
        }
    }

    /// Constants for `C = I`.
    pub fn identity_c(alpha: f64, sigma_v2: f64, q_trace: f64) -> Self {
        NoiseConstants {
            alpha,
            sigma_v2,
            q_trace,
            c_norm1: 1.0,
            c_star: 1.0,
        }
    }
}

/// Largest and smallest absolute column sums.
pub fn column_norms(c: &DMatrix<f64>) -> (f64, f64) {
    let sums: Vec<f64> = c.column_iter().map(|col| col.abs().sum()).collect();
    let max = sums.iter().copied().fold(0.0, f64::max);
    let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
    (max, min)
}

/// Spectral radius of a square matrix.
///
/// Uses a Schur decomposition with an iteration cap; if that does not
/// converge, falls back to `‖B^(2^j)‖^(1/2^j)` with rescaling.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if let Some(schur) = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
    }
    gelfand_radius(m)
}

fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    // P = B^(2^j) / exp(log_scale), kept at unit norm.
    let mut p = m.clone();
    let mut log_scale = 0.0;
    let mut estimate = f64::INFINITY;
    for j in 0..60 {
        let n = p.norm();
        if n == 0.0 {
            return 0.0;
        }
        p /= n;
        log_scale += n.ln();
        let next = (log_scale / 2f64.powi(j)).exp();
        if (next - estimate).abs() <= 1e-12 * next {
            return next;
        }
        estimate = next;
        p = &p * &p;
        log_scale *= 2.0;
    }
    estimate
}
