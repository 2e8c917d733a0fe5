//! Gradient-noise covariance and noise-constant estimation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{kron, TheoryError};
use crate::risk::{Env, LossKind, RiskModel, Sample};

/// Monte-Carlo estimate of the stacked noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct RvEstimate {
    pub matrix: DMatrix<f64>,
    /// Standard error of the Frobenius norm, from batch means.
    pub frobenius_std_error: f64,
}

/// Estimates `ℛ_v = E{g gᵀ}` where block `k` of `g` is `Σ_ℓ c_ℓk v_ℓ(w_ref)`
/// and each node's noise `v_ℓ` comes from its own independent draw.
///
/// The true gradient at `w_ref` is taken from `env`; `draw` supplies samples.
pub fn estimate_rv(
    model: &RiskModel,
    w_ref: &[f64],
    c: &DMatrix<f64>,
    n_draws: usize,
    env: Env<'_>,
    mut draw: impl FnMut() -> Sample,
) -> Result<RvEstimate, TheoryError> {
    const BATCHES: usize = 10;
    let n = c.nrows();
    let m = model.dim;
    let nm = n * m;
    if n_draws < BATCHES {
        return Err(TheoryError::SizeMismatch(format!(
            "need at least {BATCHES} draws"
        )));
    }
    let true_grad = model.true_gradient(w_ref, env)?.value;
    let mut total = DMatrix::zeros(nm, nm);
    let mut batch = DMatrix::zeros(nm, nm);
    let mut norms = Vec::with_capacity(BATCHES);
    let mut v = vec![DVector::zeros(m); n];
    let mut g = DVector::zeros(nm);
    let per_batch = n_draws / BATCHES;
    let mut in_batch = 0usize;
    for i in 0..n_draws {
        for vl in v.iter_mut() {
            let s = draw();
            *vl = model.gradient_noise(w_ref, &s, &true_grad)?;
        }
        g.fill(0.0);
        for k in 0..n {
            for l in 0..n {
                let coef = c[(l, k)];
                if coef != 0.0 {
                    g.rows_mut(k * m, m).axpy(coef, &v[l], 1.0);
                }
            }
        }
        batch.ger(1.0, &g, &g, 1.0);
        in_batch += 1;
        if in_batch == per_batch && norms.len() < BATCHES - 1 || i + 1 == n_draws {
            norms.push((&batch / in_batch as f64).norm());
            total += &batch;
            batch.fill(0.0);
            in_batch = 0;
        }
    }
    let matrix = total / n_draws as f64;
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    let b = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / b;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1.0);
    Ok(RvEstimate {
        matrix,
        frobenius_std_error: (var / b).sqrt(),
    })
}

/// Covariance `E{v vᵀ}` of one node's gradient noise at `w`, computed exactly
/// over the distribution `env` describes.
pub fn node_noise_covariance(
    model: &RiskModel,
    w: &[f64],
    env: Env<'_>,
) -> Result<DMatrix<f64>, TheoryError> {
    let m = model.dim;
    if let (LossKind::Square, Env::Analytic(lin)) = (model.kind, env) {
        // v = 2(hhᵀ - R)(w - w°) - 2hz; at w° only the -2hz term remains.
        let d = DVector::from_column_slice(w) - &lin.optimum;
        if d.amax() == 0.0 {
            return Ok(&lin.feature_cov * (4.0 * lin.noise_variance));
        }
        return Err(TheoryError::AssumptionViolation(
            "closed-form noise covariance is only available at the optimum".into(),
        ));
    }
    let (samples, weights): (&[Sample], Option<&[f64]>) = match env {
        Env::Batch(s) => (s, None),
        Env::Weighted { samples, weights } => (samples, Some(weights)),
        Env::Analytic(_) => return Err(crate::risk::RiskError::NoMomentsAvailable.into()),
    };
    let g = model.true_gradient(w, env)?.value;
    let mut cov = DMatrix::zeros(m, m);
    let n = samples.len() as f64;
    for (i, s) in samples.iter().enumerate() {
        let v = model.gradient_noise(w, s, &g)?;
        cov.ger(weights.map_or(1.0 / n, |p| p[i]), &v, &v, 1.0);
    }
    Ok(cov)
}

/// `ℛ_v = (CᵀC) ⊗ R` for nodes with independent, identically distributed
/// noise of covariance `R`.
pub fn rv_from_node_covariance(c: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    kron(&(c.transpose() * c), r)
}

/// Empirical noise constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseFit {
    pub alpha: f64,
    pub sigma_v2: f64,
    /// Always false: fitted constants are estimates, not certificates.
    pub certified: bool,
}

/// Fits `E‖v(w)‖² ≈ σ_v² + α‖w° - w‖²` on points `w° ± r e_j`, with α from
/// least squares (clamped at zero) and σ_v² raised until the bound holds at
/// every grid point. Expectations are taken over `env`.
pub fn fit_noise_constants(
    model: &RiskModel,
    w_opt: &[f64],
    env: Env<'_>,
    radii: &[f64],
) -> Result<NoiseFit, TheoryError> {
    let m = model.dim;
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let eval = |w: &[f64]| -> Result<f64, TheoryError> {
        let cov = node_noise_covariance(model, w, env)?;
        Ok(cov.trace())
    };
    pts.push((0.0, eval(w_opt)?));
    for &r in radii.iter().filter(|r| **r > 0.0) {
        for j in 0..m {
            for sign in [-1.0, 1.0] {
                let mut w = w_opt.to_vec();
                w[j] += sign * r;
                pts.push((r * r, eval(&w)?));
            }
        }
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let alpha = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let sigma_v2 = pts
        .iter()
        .map(|p| p.1 - alpha * p.0)
        .fold(0.0, f64::max);
    Ok(NoiseFit {
        alpha,
        sigma_v2,
        certified: false,
    })
}
