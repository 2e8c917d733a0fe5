//! Loss models: regularized logistic regression and the ADALINE square loss.
//!
//! A [`RiskModel`] evaluates losses and gradients on single samples. Risks,
//! true gradients and Hessians are expectations over an [`Env`], which is
//! either the closed-form moments of a Gaussian linear model or a (possibly
//! weighted) batch of samples.

mod minimize;
mod noise;

pub use minimize::{Minimum, MinimizeOptions};
pub use noise::{adaline_noise_constants, AdalineNoise};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Errors raised by loss evaluation and minimization.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RiskError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("analytic moments are not available for this model")]
    NoMomentsAvailable,
    #[error("no finite bound on the feature norm is available")]
    UnboundedFeatures,
    #[error("empty sample set")]
    EmptySamples,
    #[error("minimizer stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("invalid model `{0}`; expected `logistic:rho=<value>` or `square`")]
    UnknownModel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One labeled observation `(h, y)`.
///
/// Labels are `-1` or `+1` for classification streams. The square loss also
/// accepts real-valued targets produced by a linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Sample { features, label }
    }

    /// Inner product `hᵀw`.
    pub fn score(&self, w: &[f64]) -> f64 {
        dot(&self.features, w)
    }
}

/// Loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    /// `(rho/2)‖w‖² + log(1 + exp(-y hᵀw))`.
    Logistic { rho: f64 },
    /// `(y - hᵀw)²`.
    Square,
}

/// A loss family on `dim`-dimensional features.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub kind: LossKind,
    pub dim: usize,
    /// Certified bound on `‖h‖`, used for logistic curvature bounds.
    pub feature_norm_bound: Option<f64>,
}

/// Closed-form description of the Gaussian linear model `y = hᵀw° + z` with
/// `h ~ N(0, R_h)` and `z ~ N(0, σ_z²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub feature_cov: DMatrix<f64>,
    pub optimum: DVector<f64>,
    pub noise_variance: f64,
    chol: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(
        feature_cov: DMatrix<f64>,
        optimum: DVector<f64>,
        noise_variance: f64,
    ) -> Result<Self, RiskError> {
        let m = feature_cov.nrows();
        if !feature_cov.is_square() || optimum.len() != m {
            return Err(RiskError::DimensionMismatch {
                expected: m,
                got: optimum.len(),
            });
        }
        if !(noise_variance >= 0.0) {
            return Err(RiskError::InvalidParameter(
                "noise variance must be nonnegative".into(),
            ));
        }
        let chol = psd_sqrt(&feature_cov).ok_or_else(|| {
            RiskError::InvalidParameter("feature covariance must be symmetric PSD".into())
        })?;
        Ok(LinearModel {
            feature_cov,
            optimum,
            noise_variance,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    /// Cross-covariance `r_hy = R_h w°`.
    pub fn cross_cov(&self) -> DVector<f64> {
        &self.feature_cov * &self.optimum
    }

    /// Same distribution with a different optimum.
    pub fn with_optimum(&self, optimum: DVector<f64>) -> Self {
        LinearModel {
            optimum,
            ..self.clone()
        }
    }

    /// Draws `(h, y)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let h = self.draw_features(rng);
        let z: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_variance.sqrt();
        let y = dot(&h, self.optimum.as_slice()) + z;
        Sample::new(h, y)
    }

    /// Draws `h ~ N(0, R_h)`.
    pub fn draw_features<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.dim();
        let g = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.chol * g).as_slice().to_vec()
    }
}

/// Lower-triangular-or-symmetric square root `L` with `L Lᵀ = m` for PSD `m`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return None;
    }
    if let Some(c) = m.clone().cholesky() {
        return Some(c.l());
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * (1.0 + m.amax())) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Where expectations are taken.
#[derive(Debug, Clone, Copy)]
pub enum Env<'a> {
    /// Closed-form moments (square loss only).
    Analytic(&'a LinearModel),
    /// Uniform average over samples.
    Batch(&'a [Sample]),
    /// Weighted average; weights are nonnegative and sum to one.
    Weighted {
        samples: &'a [Sample],
        weights: &'a [f64],
    },
}

impl<'a> Env<'a> {
    fn points(&self) -> Option<(&'a [Sample], Option<&'a [f64]>)> {
        match *self {
            Env::Analytic(_) => None,
            Env::Batch(s) => Some((s, None)),
            Env::Weighted { samples, weights } => Some((samples, Some(weights))),
        }
    }
}

/// A Monte-Carlo or exact expectation with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            std_error: 0.0,
        }
    }
}

/// Componentwise estimate of a vector expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorEstimate {
    pub value: DVector<f64>,
    pub std_error: DVector<f64>,
}

/// Mean and standard error of `values` under optional weights. With weights
/// the distribution is taken as exact and the error is zero.
pub(crate) fn mean_and_se(values: &[f64], weights: Option<&[f64]>) -> Estimate {
    match weights {
        Some(p) => Estimate::exact(values.iter().zip(p).map(|(v, p)| v * p).sum()),
        None => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let se = if values.len() > 1 {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            Estimate {
                value: mean,
                std_error: se,
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + e^{-z})` without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl FromStr for RiskModel {
    type Err = RiskError;

    /// Parses `logistic:rho=<value>` or `square`. The dimension is left at
    /// zero and must be set by the caller.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RiskError::UnknownModel(s.to_string());
        let kind = match s.split_once(':') {
            None if s == "square" => LossKind::Square,
            None if s == "logistic" => LossKind::Logistic { rho: 0.0 },
            Some(("logistic", params)) => {
                let mut rho = None;
                for kv in params.split(',') {
                    match kv.split_once('=') {
                        Some(("rho", v)) => rho = Some(v.parse::<f64>().map_err(|_| bad())?),
                        _ => return Err(bad()),
                    }
                }
                LossKind::Logistic {
                    rho: rho.ok_or_else(bad)?,
                }
            }
            _ => return Err(bad()),
        };
        Ok(RiskModel {
            kind,
            dim: 0,
            feature_norm_bound: None,
        })
    }
}

impl fmt::Display for RiskModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LossKind::Logistic { rho } => write!(f, "logistic:rho={rho}"),
            LossKind::Square => f.write_str("square"),
        }
    }
}

impl RiskModel {
    pub fn logistic(dim: usize, rho: f64) -> Self {
        RiskModel {
            kind: LossKind::Logistic { rho },
            dim,
            feature_norm_bound: None,
        }
    }

    pub fn square(dim: usize) -> Self {
        RiskModel {
            kind: LossKind::Square,
            dim,
            feature_norm_bound: None,
        }
    }

    pub fn with_feature_norm_bound(mut self, bound: f64) -> Self {
        self.feature_norm_bound = Some(bound);
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    /// Regularization weight (zero for the square loss).
    pub fn rho(&self) -> f64 {
        match self.kind {
            LossKind::Logistic { rho } => rho,
            LossKind::Square => 0.0,
        }
    }

    pub fn check_dim(&self, got: usize) -> Result<(), RiskError> {
        if got != self.dim {
            return Err(RiskError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    fn check_sample(&self, w: &[f64], s: &Sample) -> Result<(), RiskError> {
        self.check_dim(w.len())?;
        self.check_dim(s.features.len())
    }

    /// Loss of `w` on one sample.
    pub fn loss(&self, w: &[f64], s: &Sample) -> Result<f64, RiskError> {
        self.check_sample(w, s)?;
        Ok(self.loss_unchecked(w, s))
    }

    pub(crate) fn loss_unchecked(&self, w: &[f64], s: &Sample) -> f64 {
        let score = s.score(w);
        match self.kind {
            LossKind::Logistic { rho } => {
                0.5 * rho * dot(w, w) + softplus(-s.label * score)
            }
            LossKind::Square => (s.label - score).powi(2),
        }
    }

    /// Gradient of [`loss`](Self::loss) with respect to `w`.
    pub fn stochastic_gradient(&self, w: &[f64], s: &Sample) -> Result<Vec<f64>, RiskError> {
        self.check_sample(w, s)?;
        let mut g = vec![0.0; self.dim];
        self.add_gradient(w, s, 1.0, &mut g);
        Ok(g)
    }

    /// `out += scale * ∇loss(w; s)`. Dimensions are the caller's
    /// responsibility.
    #[inline]
    pub fn add_gradient(&self, w: &[f64], s: &Sample, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(w.len(), s.features.len());
        let score = s.score(w);
        match self.kind {
            LossKind::Logistic { rho } => {
                let coef = -scale * s.label * sigmoid(-s.label * score);
                for ((o, &wi), &hi) in out.iter_mut().zip(w).zip(&s.features) {
                    *o += scale * rho * wi + coef * hi;
                }
            }
            LossKind::Square => {
                let coef = -2.0 * scale * (s.label - score);
                for (o, &hi) in out.iter_mut().zip(&s.features) {
                    *o += coef * hi;
                }
            }
        }
    }

    /// Risk `J(w) = E loss(w; x)`.
    pub fn risk(&self, w: &[f64], env: Env<'_>) -> Result<Estimate, RiskError> {
        self.check_dim(w.len())?;
        match env.points() {
            None => {
                let lin = self.analytic(env)?;
                let d = DVector::from_column_slice(w) - &lin.optimum;
                Ok(Estimate::exact(
                    lin.noise_variance + d.dot(&(&lin.feature_cov * &d)),
                ))
            }
            Some((samples, weights)) => {
                self.check_points(samples)?;
                let values: Vec<f64> = samples.iter().map(|s| self.loss_unchecked(w, s)).collect();
                Ok(mean_and_se(&values, weights))
            }
        }
    }

    /// Gradient of the risk, `∇J(w)`, with per-coordinate standard errors.
    pub fn true_gradient(&self, w: &[f64], env: Env<'_>) -> Result<VectorEstimate, RiskError> {
        self.check_dim(w.len())?;
        let m = self.dim;
        match env.points() {
            None => {
                let lin = self.analytic(env)?;
                let d = DVector::from_column_slice(w) - &lin.optimum;
                Ok(VectorEstimate {
                    value: 2.0 * (&lin.feature_cov * d),
                    std_error: DVector::zeros(m),
                })
            }
            Some((samples, weights)) => {
                self.check_points(samples)?;
                let mut cols = vec![Vec::with_capacity(samples.len()); m];
                let mut g = vec![0.0; m];
                for s in samples {
                    g.iter_mut().for_each(|x| *x = 0.0);
                    self.add_gradient(w, s, 1.0, &mut g);
                    for (c, &gj) in cols.iter_mut().zip(&g) {
                        c.push(gj);
                    }
                }
                let est: Vec<Estimate> = cols.iter().map(|c| mean_and_se(c, weights)).collect();
                Ok(VectorEstimate {
                    value: DVector::from_iterator(m, est.iter().map(|e| e.value)),
                    std_error: DVector::from_iterator(m, est.iter().map(|e| e.std_error)),
                })
            }
        }
    }

    /// Hessian of the risk at `w`. The logistic curvature does not depend on
    /// labels: `ρI + E{h hᵀ σ'(hᵀw)}`.
    pub fn hessian(&self, w: &[f64], env: Env<'_>) -> Result<DMatrix<f64>, RiskError> {
        self.check_dim(w.len())?;
        let m = self.dim;
        match env.points() {
            None => Ok(2.0 * &self.analytic(env)?.feature_cov),
            Some((samples, weights)) => {
                self.check_points(samples)?;
                let n = samples.len() as f64;
                let mut h = DMatrix::zeros(m, m);
                for (i, s) in samples.iter().enumerate() {
                    let p = weights.map_or(1.0 / n, |p| p[i]);
                    let curv = match self.kind {
                        LossKind::Logistic { .. } => {
                            let sg = sigmoid(s.score(w));
                            sg * (1.0 - sg)
                        }
                        LossKind::Square => 2.0,
                    };
                    let x = DVector::from_column_slice(&s.features);
                    h.ger(p * curv, &x, &x, 1.0);
                }
                for j in 0..m {
                    h[(j, j)] += self.rho();
                }
                Ok(h)
            }
        }
    }

    /// Certified bounds `(λ_min, λ_max)` on the Hessian spectrum.
    ///
    /// Logistic: `(ρ, ρ + B²/4)` with `B` the configured feature-norm bound,
    /// or the largest norm in a batch environment. Square: the extreme
    /// eigenvalues of `2R_h`.
    pub fn hessian_bounds(&self, env: Env<'_>) -> Result<(f64, f64), RiskError> {
        match self.kind {
            LossKind::Logistic { rho } => {
                let bound = match (self.feature_norm_bound, env.points()) {
                    (Some(b), _) => b,
                    (None, Some((samples, _))) if !samples.is_empty() => samples
                        .iter()
                        .map(|s| dot(&s.features, &s.features).sqrt())
                        .fold(0.0, f64::max),
                    _ => return Err(RiskError::UnboundedFeatures),
                };
                Ok((rho, rho + 0.25 * bound * bound))
            }
            LossKind::Square => {
                let r = match env.points() {
                    None => 2.0 * &self.analytic(env)?.feature_cov,
                    Some(_) => self.hessian(&vec![0.0; self.dim], env)?,
                };
                let eig = r.symmetric_eigenvalues();
                Ok((eig.min(), eig.max()))
            }
        }
    }

    /// Gradient noise `v(w) = ∇̂J(w; s) - ∇J(w)` for one sample.
    pub fn gradient_noise(
        &self,
        w: &[f64],
        s: &Sample,
        true_grad: &DVector<f64>,
    ) -> Result<DVector<f64>, RiskError> {
        let g = self.stochastic_gradient(w, s)?;
        Ok(DVector::from_vec(g) - true_grad)
    }

    fn analytic<'a>(&self, env: Env<'a>) -> Result<&'a LinearModel, RiskError> {
        match (self.kind, env) {
            (LossKind::Square, Env::Analytic(lin)) => {
                self.check_dim(lin.dim())?;
                Ok(lin)
            }
            _ => Err(RiskError::NoMomentsAvailable),
        }
    }

    fn check_points(&self, samples: &[Sample]) -> Result<(), RiskError> {
        if samples.is_empty() {
            return Err(RiskError::EmptySamples);
        }
        for s in samples {
            self.check_dim(s.features.len())?;
        }
        Ok(())
    }
}
