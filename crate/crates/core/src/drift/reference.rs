//! Reference optimizer `w°_i` for streams without a closed-form optimum.

use std::collections::VecDeque;

use super::{StreamTick, Truth};
use crate::risk::{MinimizeOptions, RiskError, RiskModel, Sample};

/// Minimizes the empirical risk of the pooled samples from `ticks`.
pub fn reference_optimizer(
    ticks: &[&[Sample]],
    model: &RiskModel,
    tol: f64,
) -> Result<Vec<f64>, RiskError> {
    let pooled: Vec<Sample> = ticks.iter().flat_map(|t| t.iter().cloned()).collect();
    model.batch_minimize(&pooled, tol)
}

/// Tracks `w°_i` along a stream.
///
/// Uses the exact optimizer when the stream emits one, the minimizer of an
/// exact discrete law (cached until the law changes), and otherwise the
/// minimizer of the samples pooled over the last `window` ticks. Successive
/// pooled solves start from the previous solution.
#[derive(Debug, Clone)]
pub struct ReferenceTracker {
    window: usize,
    tol: f64,
    history: VecDeque<Vec<Sample>>,
    cached: Option<(u64, Vec<f64>)>,
    last: Option<Vec<f64>>,
}

impl ReferenceTracker {
    pub fn new(window: usize, tol: f64) -> Self {
        ReferenceTracker {
            window: window.max(1),
            tol,
            history: VecDeque::new(),
            cached: None,
            last: None,
        }
    }

    /// Reference optimizer for `tick`.
    pub fn update(&mut self, tick: &StreamTick, model: &RiskModel) -> Result<Vec<f64>, RiskError> {
        if let Some(w) = &tick.optimizer {
            return Ok(w.clone());
        }
        if let Truth::Discrete {
            samples,
            weights,
            version,
        } = &tick.truth
        {
            if let Some((v, w)) = &self.cached {
                if v == version {
                    return Ok(w.clone());
                }
            }
            let opts = MinimizeOptions {
                tol: self.tol,
                init: self.cached.as_ref().map(|(_, w)| w.clone()),
                ..MinimizeOptions::default()
            };
            let w = model.batch_minimize_with(samples, Some(weights), &opts)?.w;
            self.cached = Some((*version, w.clone()));
            return Ok(w);
        }
        self.history.push_back(tick.samples.clone());
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        let pooled: Vec<Sample> = self.history.iter().flatten().cloned().collect();
        let opts = MinimizeOptions {
            tol: self.tol,
            init: self.last.clone(),
            ..MinimizeOptions::default()
        };
        let w = model.batch_minimize_with(&pooled, None, &opts)?.w;
        self.last = Some(w.clone());
        Ok(w)
    }
}
