//! Step-size limits and excess-risk bounds.

use serde::Serialize;

use super::{NoiseConstants, TheoryError};

/// A value with a flag telling whether its validity condition holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tagged<T> {
    pub value: T,
    pub in_regime: bool,
}

/// Largest step size for which the per-node mean-square error contracts in a
/// stationary environment: `min{2λmax/(λmax²+α), 2λmin/(λmin²+α)}`.
pub fn stationary_step_limit(lambda_min: f64, lambda_max: f64, alpha: f64) -> f64 {
    let a = 2.0 * lambda_max / (lambda_max * lambda_max + alpha);
    let b = 2.0 * lambda_min / (lambda_min * lambda_min + alpha);
    a.min(b)
}

/// Largest step size for which the network recursion contracts under drift:
/// `2λmin C_* / (‖C‖₁² (λmax² + α))`.
pub fn tracking_step_limit(nc: &NoiseConstants, lambda_min: f64, lambda_max: f64) -> f64 {
    2.0 * lambda_min * nc.c_star
        / (nc.c_norm1 * nc.c_norm1 * (lambda_max * lambda_max + nc.alpha))
}

/// Per-node excess-risk level `ε = (σ_v²/4)(λmax/λmin)μ` reached in a
/// stationary environment.
pub fn epsilon_bound(
    nc: &NoiseConstants,
    lambda_min: f64,
    lambda_max: f64,
    mu: f64,
) -> Tagged<f64> {
    Tagged {
        value: nc.sigma_v2 / 4.0 * (lambda_max / lambda_min) * mu,
        in_regime: mu > 0.0 && mu < stationary_step_limit(lambda_min, lambda_max, nc.alpha),
    }
}

/// Small-step approximation `ER_k ≈ μ Tr(R_{v,k}) / (4N)`.
pub fn simplified_er(mu: f64, r_v_k_trace: f64, n_nodes: usize) -> f64 {
    mu * r_v_k_trace / (4.0 * n_nodes as f64)
}

/// Components of the long-run excess-risk bound under random-walk drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingBound {
    pub total: f64,
    /// Grows linearly in μ.
    pub steady: f64,
    /// Decays like 1/μ.
    pub tracking: f64,
    /// Independent of μ.
    pub constant: f64,
    pub in_regime: bool,
}

/// Long-run network excess-risk bound under random-walk drift.
pub fn tracking_bound(
    nc: &NoiseConstants,
    lambda_min: f64,
    lambda_max: f64,
    mu: f64,
    dim: usize,
) -> TrackingBound {
    let denom = 4.0 * lambda_min * nc.c_star;
    let steady = nc.c_norm1 * nc.c_norm1 * nc.sigma_v2 * lambda_max / denom * mu;
    let tracking = nc.q_trace * lambda_max / denom / mu;
    let constant = dim as f64 * lambda_max / 2.0 * nc.q_trace;
    TrackingBound {
        total: steady + tracking + constant,
        steady,
        tracking,
        constant,
        in_regime: mu > 0.0 && mu < tracking_step_limit(nc, lambda_min, lambda_max),
    }
}

/// Step size minimizing the tracking bound: `sqrt(Tr(Q) / (‖C‖₁² σ_v²))`.
pub fn optimal_mu(nc: &NoiseConstants) -> Result<f64, TheoryError> {
    if !(nc.sigma_v2 > 0.0) {
        return Err(TheoryError::ZeroNoise("sigma_v2 must be positive"));
    }
    if !(nc.q_trace > 0.0) {
        return Err(TheoryError::ZeroNoise("Tr(Q) must be positive"));
    }
    Ok((nc.q_trace / (nc.c_norm1 * nc.c_norm1 * nc.sigma_v2)).sqrt())
}

/// Contraction factor `1 - 2μλmin C_* + μ²(λmax² + α)‖C‖₁²`.
pub fn beta(nc: &NoiseConstants, lambda_min: f64, lambda_max: f64, mu: f64) -> f64 {
    1.0 - 2.0 * mu * lambda_min * nc.c_star
        + mu * mu * (lambda_max * lambda_max + nc.alpha) * nc.c_norm1 * nc.c_norm1
}

/// Per-tick bound on the largest node filtering MSE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecursionBound {
    /// Bound at ticks `1..=horizon`.
    pub values: Vec<f64>,
    pub beta: f64,
    /// Fixed point, when `beta < 1`.
    pub limit: Option<f64>,
    /// Set when `beta >= 1`, so the series grows without bound.
    pub diverging: bool,
}

/// Unrolls `b_i = β b_{i-1} + (‖C‖₁²σ_v²μ² + Tr(Q))` from `b_0 = w0_bound`,
/// where `w0_bound` bounds the initial per-node squared error.
pub fn recursion_bound_trace(
    nc: &NoiseConstants,
    lambda_min: f64,
    lambda_max: f64,
    mu: f64,
    w0_bound: f64,
    horizon: usize,
) -> RecursionBound {
    let b = beta(nc, lambda_min, lambda_max, mu);
    let drive = nc.c_norm1 * nc.c_norm1 * nc.sigma_v2 * mu * mu + nc.q_trace;
    let mut values = Vec::with_capacity(horizon);
    let mut cur = w0_bound;
    for _ in 0..horizon {
        cur = b * cur + drive;
        values.push(cur);
    }
    RecursionBound {
        values,
        beta: b,
        limit: (b < 1.0).then(|| drive / (1.0 - b)),
        diverging: b >= 1.0,
    }
}
