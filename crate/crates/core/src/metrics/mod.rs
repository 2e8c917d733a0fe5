//! Excess risk, weighted mean-square error, accuracy and ROC curves, plus
//! the per-tick traces accumulated over repetitions.

mod trace;

pub use trace::{moving_average, MetricTrace, Series, VariantTrace};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::risk::{Env, Estimate, RiskError, RiskModel, Sample};
use crate::theory::Weighting;

/// Errors raised by metric evaluation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("evaluation batch is empty")]
    EmptyEvalBatch,
    #[error("ROC needs both classes in the batch")]
    SingleClassBatch,
    #[error("Hessians at the optimum are required for a risk weighting")]
    MissingHessian,
    #[error("no evaluation points")]
    NoPoints,
    #[error("node {node} out of range for {n_nodes} nodes")]
    NodeOutOfRange { node: usize, n_nodes: usize },
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// Excess risk of every node and of the network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcessRisk {
    pub nodes: Vec<Estimate>,
    /// Mean of the node values.
    pub network: Estimate,
}

/// `ER_k = J(w_k) - J(w_ref)` for every point, with expectations over `env`.
///
/// On a sample batch the losses at `w_k` and `w_ref` are paired sample by
/// sample, so equal points give exactly zero.
pub fn excess_risk(
    points: &[&[f64]],
    w_ref: &[f64],
    model: &RiskModel,
    env: Env<'_>,
) -> Result<ExcessRisk, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::NoPoints);
    }
    let (samples, weights) = match env {
        Env::Analytic(_) => {
            let base = model.risk(w_ref, env)?.value;
            let nodes = points
                .iter()
                .map(|w| Ok(Estimate::exact(model.risk(w, env)?.value - base)))
                .collect::<Result<Vec<_>, MetricsError>>()?;
            let network = Estimate::exact(mean(nodes.iter().map(|e| e.value)));
            return Ok(ExcessRisk { nodes, network });
        }
        Env::Batch(s) => (s, None),
        Env::Weighted { samples, weights } => (samples, Some(weights)),
    };
    if samples.is_empty() {
        return Err(MetricsError::EmptyEvalBatch);
    }
    model.check_dim(w_ref.len())?;
    for p in points {
        model.check_dim(p.len())?;
    }
    let n = points.len() as f64;
    let mut node_acc: Vec<Moments> = vec![Moments::default(); points.len()];
    let mut net_acc = Moments::default();
    for (j, s) in samples.iter().enumerate() {
        model.check_dim(s.features.len())?;
        let p = weights.map(|w| w[j]);
        let base = model.loss_unchecked(w_ref, s);
        let mut net = 0.0;
        for (acc, w) in node_acc.iter_mut().zip(points) {
            let d = model.loss_unchecked(w, s) - base;
            acc.push(d, p);
            net += d;
        }
        net_acc.push(net / n, p);
    }
    let count = samples.len();
    Ok(ExcessRisk {
        nodes: node_acc.iter().map(|m| m.estimate(count)).collect(),
        network: net_acc.estimate(count),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    sum: f64,
    sum_sq: f64,
    weighted: bool,
}

impl Moments {
    fn push(&mut self, x: f64, p: Option<f64>) {
        match p {
            Some(p) => {
                self.sum += p * x;
                self.weighted = true;
            }
            None => {
                self.sum += x;
                self.sum_sq += x * x;
            }
        }
    }

    fn estimate(&self, count: usize) -> Estimate {
        if self.weighted {
            return Estimate::exact(self.sum);
        }
        let n = count as f64;
        let m = self.sum / n;
        let se = if count > 1 {
            ((self.sum_sq - n * m * m).max(0.0) / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Estimate {
            value: m,
            std_error: se,
        }
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `x̃ᵀ T x̃` for the stacked errors `x̃_k = w_ref - w_k`, with `T` the
/// weighting chosen by `selector`. Risk weightings use `T_k = ½ hessians[k]`.
pub fn weighted_mse(
    points: &[&[f64]],
    w_ref: &[f64],
    selector: Weighting,
    hessians: Option<&[DMatrix<f64>]>,
) -> Result<f64, MetricsError> {
    let n = points.len();
    let err = |k: usize| -> Vec<f64> { w_ref.iter().zip(points[k]).map(|(a, b)| a - b).collect() };
    let sq = |e: &[f64]| e.iter().map(|x| x * x).sum::<f64>();
    let quad = |k: usize| -> Result<f64, MetricsError> {
        let h = hessians
            .and_then(|h| h.get(k))
            .ok_or(MetricsError::MissingHessian)?;
        let e = err(k);
        let mut acc = 0.0;
        for i in 0..e.len() {
            for j in 0..e.len() {
                acc += e[i] * h[(i, j)] * e[j];
            }
        }
        Ok(0.5 * acc)
    };
    let check = |k: usize| {
        if k < n {
            Ok(k)
        } else {
            Err(MetricsError::NodeOutOfRange { node: k, n_nodes: n })
        }
    };
    match selector {
        Weighting::NodeRisk(k) => quad(check(k)?),
        Weighting::NetworkRisk => {
            let mut acc = 0.0;
            for k in 0..n {
                acc += quad(k)?;
            }
            Ok(acc / n as f64)
        }
        Weighting::NodeMse(k) => Ok(sq(&err(check(k)?))),
        Weighting::NetworkMse => Ok((0..n).map(|k| sq(&err(k))).sum::<f64>() / n as f64),
    }
}

/// Predicted label `sign(hᵀw - b)` with `sign(0) = +1`.
pub fn classify(w: &[f64], s: &Sample, bias: f64) -> f64 {
    if s.score(w) - bias >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of correctly classified samples, optionally weighted. The
/// standard error is binomial for a batch and zero for an exact law.
pub fn accuracy(
    w: &[f64],
    samples: &[Sample],
    weights: Option<&[f64]>,
) -> Result<Estimate, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyEvalBatch);
    }
    match weights {
        Some(p) => Ok(Estimate::exact(
            samples
                .iter()
                .zip(p)
                .filter(|(s, _)| classify(w, s, 0.0) == s.label)
                .map(|(_, p)| p)
                .sum(),
        )),
        None => {
            let n = samples.len() as f64;
            let hits = samples.iter().filter(|s| classify(w, s, 0.0) == s.label).count() as f64;
            let acc = hits / n;
            Ok(Estimate {
                value: acc,
                std_error: (acc * (1.0 - acc) / n).sqrt(),
            })
        }
    }
}

/// One operating point of the bias sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Samples with `hᵀw ≥ threshold` are declared positive.
    pub threshold: f64,
    pub pfa: f64,
    pub pd: f64,
}

/// ROC curve from `(0,0)` at `+∞` to `(1,1)` at the lowest score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    /// Trapezoidal area, which gives tied scores half credit.
    pub auc: f64,
}

/// Sweeps the bias through every distinct score, highest first.
pub fn roc_curve(
    w: &[f64],
    samples: &[Sample],
    weights: Option<&[f64]>,
) -> Result<Roc, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyEvalBatch);
    }
    let mut scored: Vec<(f64, bool, f64)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.score(w) + 0.0, s.label > 0.0, weights.map_or(1.0, |p| p[i])))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos: f64 = scored.iter().filter(|x| x.1).map(|x| x.2).sum();
    let neg: f64 = scored.iter().filter(|x| !x.1).map(|x| x.2).sum();
    if pos <= 0.0 || neg <= 0.0 {
        return Err(MetricsError::SingleClassBatch);
    }
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        pfa: 0.0,
        pd: 0.0,
    }];
    let (mut tp, mut fp, mut auc) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0.total_cmp(&t).is_eq() {
            if scored[i].1 {
                tp += scored[i].2;
            } else {
                fp += scored[i].2;
            }
            i += 1;
        }
        let prev = *points.last().expect("nonempty");
        let next = RocPoint {
            threshold: t,
            pfa: fp / neg,
            pd: tp / pos,
        };
        auc += (next.pfa - prev.pfa) * (next.pd + prev.pd) / 2.0;
        points.push(next);
    }
    if let Some(last) = points.last_mut() {
        // Guard against rounding in the weighted sums.
        last.pfa = 1.0;
        last.pd = 1.0;
    }
    Ok(Roc { points, auc })
}
