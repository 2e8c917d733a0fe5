use std::collections::BTreeMap;

use serde::Serialize;

use super::Roc;

/// Per-tick sums over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub count: u64,
}

impl Series {
    pub fn new(len: usize) -> Self {
        Series {
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
            count: 0,
        }
    }

    /// A series holding one repetition.
    pub fn single(values: &[f64]) -> Self {
        Series {
            sum: values.to_vec(),
            sum_sq: values.iter().map(|v| v * v).collect(),
            count: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    /// Adds another set of repetitions.
    pub fn merge(&mut self, other: &Series) {
        assert_eq!(self.len(), other.len(), "series lengths differ");
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    /// Standard error of the mean across repetitions.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.count as f64;
        if self.count < 2 {
            return vec![0.0; self.len()];
        }
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q - n * m * m).max(0.0) / (n - 1.0) / n).sqrt()
            })
            .collect()
    }

    /// Mean over ticks `from..to` of the per-tick means.
    pub fn window_mean(&self, from: usize, to: usize) -> f64 {
        let m = self.mean();
        m[from..to].iter().sum::<f64>() / (to - from) as f64
    }
}

/// Metrics of one learner, accumulated over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantTrace {
    pub name: String,
    /// Network excess risk at `w_{i-1}`.
    pub network_er: Series,
    pub node_er: Vec<Series>,
    /// Network MSE of `w_{i-1}` against `w°_i`.
    pub prediction_mse: Series,
    /// Network MSE of `w_i` against `w°_i`.
    pub filtering_mse: Series,
    pub node_filtering_mse: Vec<Series>,
    /// Classification accuracy of `w_{i-1}` (network average).
    pub accuracy: Option<Series>,
    /// Area under the ROC of the first evaluation point, per ROC tick.
    pub auc: BTreeMap<usize, Series>,
    /// ROC curves of the lowest-indexed repetition in the trace.
    pub roc: BTreeMap<usize, Roc>,
    /// Repetition the stored ROC curves come from.
    pub roc_repetition: Option<u64>,
}

impl VariantTrace {
    pub fn new(name: &str, horizon: usize, n_points: usize, with_accuracy: bool) -> Self {
        VariantTrace {
            name: name.to_string(),
            network_er: Series::new(horizon),
            node_er: vec![Series::new(horizon); n_points],
            prediction_mse: Series::new(horizon),
            filtering_mse: Series::new(horizon),
            node_filtering_mse: vec![Series::new(horizon); n_points],
            accuracy: with_accuracy.then(|| Series::new(horizon)),
            auc: BTreeMap::new(),
            roc: BTreeMap::new(),
            roc_repetition: None,
        }
    }

    pub fn repetitions(&self) -> u64 {
        self.network_er.count
    }

    pub fn merge(&mut self, other: &VariantTrace) {
        assert_eq!(self.name, other.name, "merging different learners");
        self.network_er.merge(&other.network_er);
        for (a, b) in self.node_er.iter_mut().zip(&other.node_er) {
            a.merge(b);
        }
        self.prediction_mse.merge(&other.prediction_mse);
        self.filtering_mse.merge(&other.filtering_mse);
        for (a, b) in self.node_filtering_mse.iter_mut().zip(&other.node_filtering_mse) {
            a.merge(b);
        }
        if let (Some(a), Some(b)) = (&mut self.accuracy, &other.accuracy) {
            a.merge(b);
        }
        for (tick, s) in &other.auc {
            self.auc
                .entry(*tick)
                .and_modify(|a| a.merge(s))
                .or_insert_with(|| s.clone());
        }
        let take_other = match (self.roc_repetition, other.roc_repetition) {
            (None, Some(_)) => true,
            (Some(a), Some(b)) => b < a,
            _ => false,
        };
        if take_other {
            self.roc = other.roc.clone();
            self.roc_repetition = other.roc_repetition;
        }
    }

    /// Per-tick maximum over nodes of the mean filtering MSE.
    pub fn max_node_filtering_mse(&self) -> Vec<f64> {
        let means: Vec<Vec<f64>> = self.node_filtering_mse.iter().map(|s| s.mean()).collect();
        (0..self.filtering_mse.len())
            .map(|i| means.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Ticks where a node's mean excess risk is below `-4` standard errors.
    pub fn negative_er_ticks(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for s in std::iter::once(&self.network_er).chain(&self.node_er) {
            for (i, (m, se)) in s.mean().iter().zip(s.std_error()).enumerate() {
                if *m < -4.0 * se && *m < -1e-12 {
                    out.push(i + 1);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Traces of every learner in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTrace {
    pub horizon: usize,
    pub variants: Vec<VariantTrace>,
}

impl MetricTrace {
    pub fn repetitions(&self) -> u64 {
        self.variants.first().map_or(0, |v| v.repetitions())
    }

    pub fn merge(&mut self, other: &MetricTrace) {
        assert_eq!(self.horizon, other.horizon, "horizons differ");
        assert_eq!(self.variants.len(), other.variants.len(), "learner sets differ");
        for (a, b) in self.variants.iter_mut().zip(&other.variants) {
            a.merge(b);
        }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantTrace> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Trailing moving average over `window` ticks; early ticks average what is
/// available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
