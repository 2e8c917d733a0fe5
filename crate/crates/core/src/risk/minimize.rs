//! Deterministic batch minimizer for the empirical risk.

use super::{dot, RiskError, RiskModel, Sample};

/// Settings for [`RiskModel::batch_minimize_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    /// Stop once the gradient norm of the empirical risk is at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; zero when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            tol: 1e-8,
            max_iter: 100_000,
            init: None,
        }
    }
}

/// A converged minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub w: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl RiskModel {
    /// Minimizes the mean loss over `samples` to gradient norm `tol`.
    pub fn batch_minimize(&self, samples: &[Sample], tol: f64) -> Result<Vec<f64>, RiskError> {
        let opts = MinimizeOptions {
            tol,
            ..MinimizeOptions::default()
        };
        Ok(self.batch_minimize_with(samples, None, &opts)?.w)
    }

    /// Gradient descent with Barzilai-Borwein trial steps and Armijo
    /// backtracking on the (optionally weighted) mean loss.
    pub fn batch_minimize_with(
        &self,
        samples: &[Sample],
        weights: Option<&[f64]>,
        opts: &MinimizeOptions,
    ) -> Result<Minimum, RiskError> {
        if samples.is_empty() {
            return Err(RiskError::EmptySamples);
        }
        for s in samples {
            self.check_dim(s.features.len())?;
        }
        if let Some(p) = weights {
            if p.len() != samples.len() {
                return Err(RiskError::DimensionMismatch {
                    expected: samples.len(),
                    got: p.len(),
                });
            }
        }
        let m = self.dim;
        let mut w = match &opts.init {
            Some(init) => {
                self.check_dim(init.len())?;
                init.clone()
            }
            None => vec![0.0; m],
        };
        let obj = Objective {
            model: self,
            samples,
            weights,
        };
        let mut g = obj.gradient(&w);
        let mut f = obj.value(&w);
        let mut step = 1.0;
        let mut trial = vec![0.0; m];
        for iter in 0..opts.max_iter {
            let gn2 = dot(&g, &g);
            if gn2.sqrt() <= opts.tol {
                return Ok(Minimum {
                    w,
                    grad_norm: gn2.sqrt(),
                    iterations: iter,
                });
            }
            let mut t = step;
            let mut f_new;
            loop {
                for j in 0..m {
                    trial[j] = w[j] - t * g[j];
                }
                f_new = obj.value(&trial);
                // Near the optimum the decrease drops below the rounding of f;
                // the trial step is then accepted on the gradient's authority.
                let slack = 8.0 * f64::EPSILON * f.abs();
                if f_new <= f - 1e-4 * t * gn2 + slack || t < 1e-20 {
                    break;
                }
                t *= 0.5;
            }
            let g_new = obj.gradient(&trial);
            let mut sy = 0.0;
            let mut ss = 0.0;
            for j in 0..m {
                let sj = trial[j] - w[j];
                ss += sj * sj;
                sy += sj * (g_new[j] - g[j]);
            }
            step = if sy > 0.0 { ss / sy } else { 2.0 * t };
            if ss == 0.0 {
                // No representable progress along the gradient.
                let gn = dot(&g_new, &g_new).sqrt();
                return Err(RiskError::NonConvergence {
                    iterations: iter + 1,
                    grad_norm: gn,
                });
            }
            std::mem::swap(&mut w, &mut trial);
            g = g_new;
            f = f_new;
        }
        Err(RiskError::NonConvergence {
            iterations: opts.max_iter,
            grad_norm: dot(&g, &g).sqrt(),
        })
    }
}

struct Objective<'a> {
    model: &'a RiskModel,
    samples: &'a [Sample],
    weights: Option<&'a [f64]>,
}

impl Objective<'_> {
    fn weight(&self, i: usize) -> f64 {
        self.weights
            .map_or(1.0 / self.samples.len() as f64, |p| p[i])
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| self.weight(i) * self.model.loss_unchecked(w, s))
            .sum()
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for (i, s) in self.samples.iter().enumerate() {
            self.model.add_gradient(w, s, self.weight(i), &mut g);
        }
        g
    }
}
