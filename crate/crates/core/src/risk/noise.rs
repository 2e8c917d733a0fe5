//! Gradient-noise constants for the ADALINE square loss.

use rand::Rng;

use super::{LinearModel, RiskError};

/// Constants of the noise bound `E‖v(w)‖² ≤ α‖w° - w‖² + σ_v²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdalineNoise {
    pub alpha: f64,
    pub alpha_std_error: f64,
    pub sigma_v2: f64,
}

/// `α = 4 E{σ_max(R_h - h hᵀ)²}` by Monte Carlo over `draws` feature vectors,
/// and `σ_v² = 4 Tr(R_h) σ_z²` in closed form.
pub fn adaline_noise_constants<R: Rng + ?Sized>(
    lin: &LinearModel,
    draws: usize,
    rng: &mut R,
) -> Result<AdalineNoise, RiskError> {
    if draws == 0 {
        return Err(RiskError::InvalidParameter("draws must be positive".into()));
    }
    let sigma_v2 = 4.0 * lin.feature_cov.trace() * lin.noise_variance;
    let m = lin.dim();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut diff = lin.feature_cov.clone();
    for _ in 0..draws {
        let h = lin.draw_features(rng);
        for c in 0..m {
            for r in 0..m {
                diff[(r, c)] = lin.feature_cov[(r, c)] - h[r] * h[c];
            }
        }
        let smax = spectral_norm_sym(&diff);
        let x = 4.0 * smax * smax;
        sum += x;
        sum_sq += x * x;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = if draws > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(AdalineNoise {
        alpha: mean,
        alpha_std_error: (var / n).sqrt(),
        sigma_v2,
    })
}

fn spectral_norm_sym(m: &nalgebra::DMatrix<f64>) -> f64 {
    if m.nrows() == 2 {
        let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        return (mid + rad).abs().max((mid - rad).abs());
    }
    m.clone().symmetric_eigenvalues().amax()
}
