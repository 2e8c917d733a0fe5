//! Repeated runs of several learners on one shared stream.

use rayon::prelude::*;
use serde::Serialize;

use super::{EngineError, Learner, LearnerSpec};
use crate::drift::{DriftSpec, ReferenceTracker, Truth};
use crate::metrics::{
    accuracy, excess_risk, roc_curve, weighted_mse, MetricTrace, MetricsError, Series,
    VariantTrace,
};
use crate::risk::{Env, RiskModel, Sample};
use crate::seed;
use crate::theory::Weighting;

/// Repetitions folded sequentially before blocks are merged. Fixed so that
/// the thread count never changes the floating-point summation order.
const BLOCK: u64 = 4;

/// Where risk expectations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Closed form for linear models, the exact law for small finite
    /// supports, and the fresh evaluation batch otherwise.
    Auto,
    /// Always the fresh evaluation batch.
    Batch,
}

/// Metric settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricOptions {
    pub eval: EvalMode,
    /// Ticks at which ROC curves are recorded.
    pub roc_ticks: Vec<usize>,
    /// Ticks pooled when the optimizer must be estimated from samples.
    pub reference_window: usize,
    pub reference_tol: f64,
    /// Largest finite support evaluated exactly in `Auto` mode.
    pub exact_support_limit: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            eval: EvalMode::Auto,
            roc_ticks: Vec::new(),
            reference_window: 1,
            reference_tol: 1e-8,
            exact_support_limit: 4096,
        }
    }
}

/// A full experiment: every learner sees the same samples at every tick.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub n_nodes: usize,
    pub model: RiskModel,
    pub drift: DriftSpec,
    pub learners: Vec<LearnerSpec>,
    pub horizon: usize,
    pub repetitions: u64,
    /// Fresh evaluation samples per tick, used when no exact law applies.
    pub eval_batch: usize,
    pub seed: u64,
    pub metrics: MetricOptions,
}

/// One repetition's trace with the sample digest of every learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Repetition {
    pub trace: MetricTrace,
    pub digests: Vec<u64>,
}

enum Source {
    Analytic,
    Exact,
    Batch,
}

impl Experiment {
    /// Checks sizes and settings before any work is done.
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |reason: &str| EngineError::InvalidSpec {
            learner: "experiment".into(),
            reason: reason.into(),
        };
        if self.horizon == 0 || self.repetitions == 0 || self.n_nodes == 0 {
            return Err(bad("horizon, repetitions and node count must be positive"));
        }
        if self.learners.is_empty() {
            return Err(bad("no learners"));
        }
        let mut names: Vec<&str> = self.learners.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("learner names must be unique"));
        }
        self.drift.validate()?;
        if self.drift.dim() != self.model.dim {
            return Err(bad("model and stream dimensions differ"));
        }
        for l in &self.learners {
            l.validate(self.n_nodes, Some(self.model.dim))?;
        }
        if matches!(self.source(), Source::Batch) && self.eval_batch == 0 {
            return Err(MetricsError::EmptyEvalBatch.into());
        }
        Ok(())
    }

    fn source(&self) -> Source {
        match (&self.metrics.eval, &self.drift) {
            (EvalMode::Batch, _) => Source::Batch,
            (EvalMode::Auto, DriftSpec::LinearWalk { .. }) => Source::Analytic,
            (EvalMode::Auto, DriftSpec::Stagger { .. }) => Source::Exact,
            (EvalMode::Auto, DriftSpec::Dataset { samples })
                if samples.len() <= self.metrics.exact_support_limit =>
            {
                Source::Exact
            }
            _ => Source::Batch,
        }
    }

    /// Whether accuracy and ROC are recorded.
    pub fn is_classification(&self) -> bool {
        !self.drift.is_regression()
    }

    /// Runs repetition `rep` with streams derived from the master seed.
    pub fn run_repetition(&self, rep: u64) -> Result<Repetition, EngineError> {
        let source = self.source();
        let eval_size = if matches!(source, Source::Batch) {
            self.eval_batch
        } else {
            0
        };
        let mut stream = self
            .drift
            .start(self.n_nodes, seed::derive(self.seed, &[rep]))?
            .with_eval_batch(eval_size);
        let mut learners = self
            .learners
            .iter()
            .map(|s| Learner::new(s.clone(), self.n_nodes, self.model.dim))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tracker =
            ReferenceTracker::new(self.metrics.reference_window, self.metrics.reference_tol);
        let classify = self.is_classification();
        let t = self.horizon;
        let mut rows: Vec<Rows> = learners
            .iter()
            .map(|l| Rows::new(t, l.n_eval_points(), classify))
            .collect();
        let mut rocs: Vec<VariantTrace> = learners
            .iter()
            .map(|l| VariantTrace::new(l.name(), 0, 0, false))
            .collect();
        for i in 0..t {
            let tick = stream.next_tick()?;
            let w_ref = tracker.update(&tick, &self.model)?;
            let exact_law;
            let (env, law): (Env<'_>, Option<(&[Sample], Option<&[f64]>)>) =
                match (&source, &tick.truth) {
                    (Source::Analytic, Truth::Linear(lin)) => (Env::Analytic(lin), None),
                    (Source::Exact, Truth::Discrete { samples, weights, .. }) => {
                        exact_law = (samples.clone(), weights.clone());
                        (
                            Env::Weighted {
                                samples: &exact_law.0,
                                weights: &exact_law.1,
                            },
                            Some((&exact_law.0[..], Some(&exact_law.1[..]))),
                        )
                    }
                    _ => (Env::Batch(&tick.eval_batch), Some((&tick.eval_batch[..], None))),
                };
            let roc_tick = self.metrics.roc_ticks.contains(&(i + 1));
            for ((learner, row), roc) in learners.iter_mut().zip(&mut rows).zip(&mut rocs) {
                let prev = learner.eval_points();
                let refs: Vec<&[f64]> = prev.iter().map(|p| p.as_slice()).collect();
                let er = excess_risk(&refs, &w_ref, &self.model, env)?;
                row.network_er[i] = er.network.value;
                for (k, e) in er.nodes.iter().enumerate() {
                    row.node_er[k][i] = e.value;
                }
                row.prediction_mse[i] = weighted_mse(&refs, &w_ref, Weighting::NetworkMse, None)?;
                if let (Some(acc), Some((samples, weights))) = (&mut row.accuracy, law) {
                    let mut total = 0.0;
                    for p in &refs {
                        total += accuracy(p, samples, weights)?.value;
                    }
                    acc[i] = total / refs.len() as f64;
                }
                if roc_tick && classify {
                    if let Some((samples, weights)) = law {
                        let mut auc = 0.0;
                        for (k, p) in refs.iter().enumerate() {
                            let curve = roc_curve(p, samples, weights)?;
                            auc += curve.auc;
                            if k == 0 {
                                roc.roc.insert(i + 1, curve);
                            }
                        }
                        roc.auc
                            .insert(i + 1, Series::single(&[auc / refs.len() as f64]));
                    }
                }
                learner.step(&self.model, &tick.samples).map_err(|e| match e {
                    EngineError::Divergence {
                        learner,
                        node,
                        time,
                        mu,
                        ..
                    } => EngineError::Divergence {
                        learner,
                        node,
                        time,
                        mu,
                        repetition: Some(rep),
                    },
                    e => e,
                })?;
                let now = learner.eval_points();
                let mut net = 0.0;
                for (k, p) in now.iter().enumerate() {
                    let e: f64 = w_ref.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    row.node_filtering_mse[k][i] = e;
                    net += e;
                }
                row.filtering_mse[i] = net / now.len() as f64;
            }
        }
        let digests = learners.iter().map(|l| l.digest()).collect();
        let variants = learners
            .iter()
            .zip(rows)
            .zip(rocs)
            .map(|((l, row), roc)| {
                let mut v = row.into_trace(l.name());
                v.auc = roc.auc;
                if !roc.roc.is_empty() {
                    v.roc = roc.roc;
                    v.roc_repetition = Some(rep);
                }
                v
            })
            .collect();
        Ok(Repetition {
            trace: MetricTrace {
                horizon: t,
                variants,
            },
            digests,
        })
    }

    /// Runs every repetition, in parallel on up to `threads` threads (all
    /// available when `None`). The result does not depend on `threads`.
    pub fn run(&self, threads: Option<usize>) -> Result<MetricTrace, EngineError> {
        self.validate()?;
        let blocks: Vec<u64> = (0..self.repetitions.div_ceil(BLOCK)).collect();
        let work = |b: &u64| -> Result<MetricTrace, EngineError> {
            let from = b * BLOCK;
            let to = ((b + 1) * BLOCK).min(self.repetitions);
            let mut acc: Option<MetricTrace> = None;
            for rep in from..to {
                let r = self.run_repetition(rep)?;
                if r.digests.windows(2).any(|w| w[0] != w[1]) {
                    return Err(EngineError::InvalidSpec {
                        learner: "experiment".into(),
                        reason: format!("learners consumed different samples in repetition {rep}"),
                    });
                }
                match &mut acc {
                    None => acc = Some(r.trace),
                    Some(a) => a.merge(&r.trace),
                }
            }
            Ok(acc.expect("blocks are nonempty"))
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| EngineError::InvalidSpec {
                learner: "experiment".into(),
                reason: format!("thread pool: {e}"),
            })?;
        let parts: Vec<Result<MetricTrace, EngineError>> =
            pool.install(|| blocks.par_iter().map(work).collect());
        let mut out: Option<MetricTrace> = None;
        for p in parts {
            let p = p?;
            match &mut out {
                None => out = Some(p),
                Some(o) => o.merge(&p),
            }
        }
        Ok(out.expect("at least one repetition"))
    }
}

/// Per-tick values of one learner in one repetition.
struct Rows {
    network_er: Vec<f64>,
    node_er: Vec<Vec<f64>>,
    prediction_mse: Vec<f64>,
    filtering_mse: Vec<f64>,
    node_filtering_mse: Vec<Vec<f64>>,
    accuracy: Option<Vec<f64>>,
}

impl Rows {
    fn new(t: usize, points: usize, classify: bool) -> Self {
        Rows {
            network_er: vec![0.0; t],
            node_er: vec![vec![0.0; t]; points],
            prediction_mse: vec![0.0; t],
            filtering_mse: vec![0.0; t],
            node_filtering_mse: vec![vec![0.0; t]; points],
            accuracy: classify.then(|| vec![0.0; t]),
        }
    }

    fn into_trace(self, name: &str) -> VariantTrace {
        let mut v = VariantTrace::new(name, 0, 0, false);
        v.network_er = Series::single(&self.network_er);
        v.node_er = self.node_er.iter().map(|r| Series::single(r)).collect();
        v.prediction_mse = Series::single(&self.prediction_mse);
        v.filtering_mse = Series::single(&self.filtering_mse);
        v.node_filtering_mse = self.node_filtering_mse.iter().map(|r| Series::single(r)).collect();
        v.accuracy = self.accuracy.map(|a| Series::single(&a));
        v
    }
}
