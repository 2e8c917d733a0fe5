//! Learner updates over a stream: general diffusion and its ATC, CTA and
//! non-cooperative presets, consensus, the centralized full-gradient
//! baseline and time-horizon averaging.
//!
//! All nodes update in lockstep. Node weights are stored node-major in one
//! flat buffer.

mod experiment;

pub use experiment::{EvalMode, Experiment, MetricOptions};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::metrics::MetricsError;
use crate::risk::{RiskError, RiskModel, Sample};
use crate::theory::{stationary_step_limit, tracking_step_limit, NoiseConstants};
use crate::topology::{preset_matrices, CombinationSet, DiffusionVariant, TopologyError};
use crate::drift::DriftError;

/// Weights with magnitude above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Errors raised while building or running learners.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(
        "learner `{learner}` diverged at node {node}, tick {time} (mu = {mu}{})",
        repetition.map(|r| format!(", repetition {r}")).unwrap_or_default()
    )]
    Divergence {
        learner: String,
        node: usize,
        time: usize,
        mu: f64,
        repetition: Option<u64>,
    },
    #[error("invalid learner `{learner}`: {reason}")]
    InvalidSpec { learner: String, reason: String },
    #[error("unknown learner variant `{0}`")]
    UnknownVariant(String),
    #[error("expected {expected} samples, got {got}")]
    SampleCount { expected: usize, got: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Learner families selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    GeneralDiffusion,
    Atc,
    Cta,
    NonCooperative,
    Consensus,
    /// Consensus with step size `μ/√i`.
    ConsensusDiminishing,
    Cfg,
    Tha,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::GeneralDiffusion,
        Variant::Atc,
        Variant::Cta,
        Variant::NonCooperative,
        Variant::Consensus,
        Variant::ConsensusDiminishing,
        Variant::Cfg,
        Variant::Tha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GeneralDiffusion => "general",
            Variant::Atc => "atc",
            Variant::Cta => "cta",
            Variant::NonCooperative => "noncoop",
            Variant::Consensus => "consensus",
            Variant::ConsensusDiminishing => "consensus-diminishing",
            Variant::Cfg => "cfg",
            Variant::Tha => "tha",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non-cooperative" | "noncooperative" => return Ok(Variant::NonCooperative),
            "general-diffusion" => return Ok(Variant::GeneralDiffusion),
            _ => {}
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EngineError::UnknownVariant(s.to_string()))
    }
}

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// `μ_i = μ/√i`.
    InverseSqrt,
}

/// How a learner combines information.
#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// Combine with `A1`, adapt with `C`, combine with `A2`.
    Diffusion(CombinationSet),
    /// `w_k ← Σ a_ℓk w_ℓ - μ_i ∇̂J_k(w_k)`.
    Consensus(DMatrix<f64>),
    /// One central iterate stepping along the average of all node gradients.
    Centralized,
    /// Non-cooperative nodes whose average is evaluated but never fed back.
    TimeAveraged,
}

/// A learner to run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub name: String,
    pub rule: Rule,
    pub step_size: f64,
    pub schedule: Schedule,
    /// Initial weights per node; zero when absent.
    pub initial: Option<Vec<Vec<f64>>>,
}

impl LearnerSpec {
    /// A named variant using the combination matrix `a` where one is needed.
    pub fn from_variant(variant: Variant, a: &DMatrix<f64>, mu: f64) -> Result<Self, EngineError> {
        let n = a.nrows();
        let (rule, schedule) = match variant {
            Variant::Atc => (
                Rule::Diffusion(preset_matrices(DiffusionVariant::Atc, a)?),
                Schedule::Constant,
            ),
            Variant::Cta => (
                Rule::Diffusion(preset_matrices(DiffusionVariant::Cta, a)?),
                Schedule::Constant,
            ),
            Variant::NonCooperative => (
                Rule::Diffusion(CombinationSet::identity(n)),
                Schedule::Constant,
            ),
            Variant::GeneralDiffusion => (
                Rule::Diffusion(CombinationSet::general(a.clone(), a.clone(), a.clone())?),
                Schedule::Constant,
            ),
            Variant::Consensus => (Rule::Consensus(a.clone()), Schedule::Constant),
            Variant::ConsensusDiminishing => (Rule::Consensus(a.clone()), Schedule::InverseSqrt),
            Variant::Cfg => (Rule::Centralized, Schedule::Constant),
            Variant::Tha => (Rule::TimeAveraged, Schedule::Constant),
        };
        let spec = LearnerSpec {
            name: variant.name().to_string(),
            rule,
            step_size: mu,
            schedule,
            initial: None,
        };
        spec.validate(n, None)?;
        Ok(spec)
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_initial(mut self, initial: Vec<Vec<f64>>) -> Self {
        self.initial = Some(initial);
        self
    }

    fn invalid(&self, reason: impl Into<String>) -> EngineError {
        EngineError::InvalidSpec {
            learner: self.name.clone(),
            reason: reason.into(),
        }
    }

    /// Checks the step size, schedule, matrix sizes and initial weights.
    pub fn validate(&self, n_nodes: usize, dim: Option<usize>) -> Result<(), EngineError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(self.invalid(format!("step size {} must be positive", self.step_size)));
        }
        if self.schedule == Schedule::InverseSqrt && !matches!(self.rule, Rule::Consensus(_)) {
            return Err(self.invalid("the inverse-sqrt schedule is only available for consensus"));
        }
        match &self.rule {
            Rule::Diffusion(set) => {
                set.validate()?;
                if set.n_nodes() != n_nodes {
                    return Err(self.invalid(format!(
                        "matrices are {0}x{0}, network has {n_nodes} nodes",
                        set.n_nodes()
                    )));
                }
            }
            Rule::Consensus(a) => {
                if a.shape() != (n_nodes, n_nodes) {
                    return Err(self.invalid("consensus matrix size differs from the network"));
                }
                CombinationSet::general(a.clone(), a.clone(), DMatrix::identity(n_nodes, n_nodes))?;
            }
            Rule::Centralized | Rule::TimeAveraged => {}
        }
        if let Some(init) = &self.initial {
            if init.len() != n_nodes {
                return Err(self.invalid("initial weights need one vector per node"));
            }
            if let Some(m) = dim {
                if init.iter().any(|w| w.len() != m) {
                    return Err(self.invalid(format!("initial weights must have length {m}")));
                }
            }
        }
        Ok(())
    }

    /// Step size at tick `i` (starting at 1).
    pub fn step_at(&self, i: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.step_size,
            Schedule::InverseSqrt => self.step_size / (i.max(1) as f64).sqrt(),
        }
    }
}

/// Weights and scratch buffers of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub n_nodes: usize,
    pub dim: usize,
    /// `w_{k,i}`, node-major.
    pub weights: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Index of the last completed tick.
    pub time: usize,
    /// Central iterate of the full-gradient baseline.
    pub central: Vec<f64>,
}

impl NetworkState {
    pub fn zeros(n_nodes: usize, dim: usize) -> Self {
        NetworkState {
            n_nodes,
            dim,
            weights: vec![0.0; n_nodes * dim],
            phi: vec![0.0; n_nodes * dim],
            psi: vec![0.0; n_nodes * dim],
            time: 0,
            central: vec![0.0; dim],
        }
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn nodes(&self) -> Vec<&[f64]> {
        self.weights.chunks(self.dim).collect()
    }
}

/// Mean of the node weights.
pub fn tha_average(state: &NetworkState) -> Vec<f64> {
    let mut avg = vec![0.0; state.dim];
    for w in state.weights.chunks(state.dim) {
        for (a, x) in avg.iter_mut().zip(w) {
            *a += x;
        }
    }
    let n = state.n_nodes as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

/// Nonzero entries of each column, in ascending row order.
#[derive(Debug, Clone, PartialEq)]
struct Columns(Vec<Vec<(usize, f64)>>);

impl Columns {
    fn of(m: &DMatrix<f64>) -> Self {
        Columns(
            (0..m.ncols())
                .map(|k| {
                    (0..m.nrows())
                        .filter(|&l| m[(l, k)] != 0.0)
                        .map(|l| (l, m[(l, k)]))
                        .collect()
                })
                .collect(),
        )
    }

    /// `out_k = Σ_ℓ m_ℓk x_ℓ` for every node.
    fn combine(&self, x: &[f64], out: &mut [f64], dim: usize) {
        for (k, col) in self.0.iter().enumerate() {
            let o = &mut out[k * dim..(k + 1) * dim];
            o.fill(0.0);
            for &(l, a) in col {
                for (oi, xi) in o.iter_mut().zip(&x[l * dim..(l + 1) * dim]) {
                    *oi += a * xi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    Diffusion { a1: Columns, a2: Columns, c: Columns },
    Consensus(Columns),
    Centralized,
    TimeAveraged(Columns),
}

fn check_samples(state: &NetworkState, samples: &[Sample]) -> Result<(), EngineError> {
    if samples.len() != state.n_nodes {
        return Err(EngineError::SampleCount {
            expected: state.n_nodes,
            got: samples.len(),
        });
    }
    for s in samples {
        if s.features.len() != state.dim {
            return Err(RiskError::DimensionMismatch {
                expected: state.dim,
                got: s.features.len(),
            }
            .into());
        }
    }
    Ok(())
}

fn diffusion_compiled(
    state: &mut NetworkState,
    a1: &Columns,
    a2: &Columns,
    c: &Columns,
    mu: f64,
    model: &RiskModel,
    samples: &[Sample],
) {
    let m = state.dim;
    a1.combine(&state.weights, &mut state.phi, m);
    let mut g = vec![0.0; m];
    for (k, col) in c.0.iter().enumerate() {
        let phi_k = &state.phi[k * m..(k + 1) * m];
        g.fill(0.0);
        for &(l, c_lk) in col {
            model.add_gradient(phi_k, &samples[l], c_lk, &mut g);
        }
        for ((p, f), gi) in state.psi[k * m..(k + 1) * m].iter_mut().zip(phi_k).zip(&g) {
            *p = f - mu * gi;
        }
    }
    a2.combine(&state.psi, &mut state.weights, m);
}

fn consensus_compiled(
    state: &mut NetworkState,
    a: &Columns,
    mu: f64,
    model: &RiskModel,
    samples: &[Sample],
) {
    let m = state.dim;
    a.combine(&state.weights, &mut state.phi, m);
    let mut g = vec![0.0; m];
    for k in 0..state.n_nodes {
        g.fill(0.0);
        model.add_gradient(&state.weights[k * m..(k + 1) * m], &samples[k], 1.0, &mut g);
        for (p, gi) in state.phi[k * m..(k + 1) * m].iter_mut().zip(&g) {
            *p -= mu * gi;
        }
    }
    std::mem::swap(&mut state.weights, &mut state.phi);
}

fn cfg_compiled(state: &mut NetworkState, mu: f64, model: &RiskModel, samples: &[Sample]) {
    let mut g = vec![0.0; state.dim];
    for s in samples {
        model.add_gradient(&state.central, s, 1.0, &mut g);
    }
    let scale = mu / samples.len() as f64;
    for (w, gi) in state.central.iter_mut().zip(&g) {
        *w -= scale * gi;
    }
}

/// One tick of the general diffusion update:
/// `φ_k = Σ a1_ℓk w_ℓ`, `ψ_k = φ_k - μ Σ c_ℓk ∇̂J_ℓ(φ_k)`, `w_k = Σ a2_ℓk ψ_ℓ`,
/// where `∇̂J_ℓ(φ_k)` uses node `ℓ`'s sample at node `k`'s point.
pub fn diffusion_step(
    state: &mut NetworkState,
    set: &CombinationSet,
    mu: f64,
    model: &RiskModel,
    samples: &[Sample],
) -> Result<(), EngineError> {
    check_samples(state, samples)?;
    diffusion_compiled(
        state,
        &Columns::of(&set.a1),
        &Columns::of(&set.a2),
        &Columns::of(&set.c),
        mu,
        model,
        samples,
    );
    state.time += 1;
    Ok(())
}

/// One consensus tick with the gradient taken at the node's own previous
/// iterate.
pub fn consensus_step(
    state: &mut NetworkState,
    a: &DMatrix<f64>,
    mu: f64,
    model: &RiskModel,
    samples: &[Sample],
) -> Result<(), EngineError> {
    check_samples(state, samples)?;
    consensus_compiled(state, &Columns::of(a), mu, model, samples);
    state.time += 1;
    Ok(())
}

/// One step of `w ← w - (μ/N) Σ_k ∇̂J_k(w)` on the central iterate.
pub fn cfg_step(
    state: &mut NetworkState,
    mu: f64,
    model: &RiskModel,
    samples: &[Sample],
) -> Result<(), EngineError> {
    check_samples(state, samples)?;
    cfg_compiled(state, mu, model, samples);
    state.time += 1;
    Ok(())
}

/// A learner with its state and precompiled combination structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    spec: LearnerSpec,
    compiled: Compiled,
    state: NetworkState,
    digest: u64,
}

impl Learner {
    pub fn new(spec: LearnerSpec, n_nodes: usize, dim: usize) -> Result<Self, EngineError> {
        spec.validate(n_nodes, Some(dim))?;
        let compiled = match &spec.rule {
            Rule::Diffusion(set) => Compiled::Diffusion {
                a1: Columns::of(&set.a1),
                a2: Columns::of(&set.a2),
                c: Columns::of(&set.c),
            },
            Rule::Consensus(a) => Compiled::Consensus(Columns::of(a)),
            Rule::Centralized => Compiled::Centralized,
            Rule::TimeAveraged => {
                Compiled::TimeAveraged(Columns::of(&DMatrix::identity(n_nodes, n_nodes)))
            }
        };
        let mut state = NetworkState::zeros(n_nodes, dim);
        if let Some(init) = &spec.initial {
            state.weights = init.concat();
            if matches!(spec.rule, Rule::Centralized) {
                state.central = tha_average(&state);
            }
        }
        Ok(Learner {
            spec,
            compiled,
            state,
            digest: 0,
        })
    }

    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    /// Running hash of every sample consumed so far.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Applies one tick.
    pub fn step(&mut self, model: &RiskModel, samples: &[Sample]) -> Result<(), EngineError> {
        check_samples(&self.state, samples)?;
        self.digest = samples.iter().fold(self.digest, |h, s| {
            s.features
                .iter()
                .chain(std::iter::once(&s.label))
                .fold(h, |h, x| mix(h ^ x.to_bits()))
        });
        let i = self.state.time + 1;
        let mu = self.spec.step_at(i);
        match &self.compiled {
            Compiled::Diffusion { a1, a2, c } => {
                diffusion_compiled(&mut self.state, a1, a2, c, mu, model, samples)
            }
            Compiled::Consensus(a) => consensus_compiled(&mut self.state, a, mu, model, samples),
            Compiled::Centralized => cfg_compiled(&mut self.state, mu, model, samples),
            Compiled::TimeAveraged(id) => {
                diffusion_compiled(&mut self.state, id, id, id, mu, model, samples)
            }
        }
        self.state.time = i;
        self.check_divergence()
    }

    fn check_divergence(&self) -> Result<(), EngineError> {
        let m = self.state.dim;
        let bad = |x: &f64| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT;
        let node = match self.compiled {
            Compiled::Centralized => self.state.central.iter().position(bad).map(|_| 0),
            _ => self.state.weights.iter().position(bad).map(|j| j / m),
        };
        match node {
            Some(node) => Err(EngineError::Divergence {
                learner: self.spec.name.clone(),
                node,
                time: self.state.time,
                mu: self.spec.step_at(self.state.time),
                repetition: None,
            }),
            None => Ok(()),
        }
    }

    /// Points on which metrics are evaluated: every node, the central
    /// iterate, or the network average.
    pub fn eval_points(&self) -> Vec<Vec<f64>> {
        match self.compiled {
            Compiled::Centralized => vec![self.state.central.clone()],
            Compiled::TimeAveraged(_) => vec![tha_average(&self.state)],
            _ => self.state.weights.chunks(self.state.dim).map(<[f64]>::to_vec).collect(),
        }
    }

    /// Number of evaluation points.
    pub fn n_eval_points(&self) -> usize {
        match self.compiled {
            Compiled::Centralized | Compiled::TimeAveraged(_) => 1,
            _ => self.state.n_nodes,
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Result of checking a step size against the stability conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub mu: f64,
    /// Largest stable step size without drift.
    pub stationary_limit: f64,
    /// Largest step size for which the drift recursion contracts.
    pub tracking_limit: f64,
    pub stationary_ok: bool,
    pub tracking_ok: bool,
    pub warnings: Vec<String>,
}

impl StabilityReport {
    pub fn ok(&self) -> bool {
        self.stationary_ok && self.tracking_ok
    }
}

/// Checks `mu` against both step-size conditions. Advisory only.
pub fn stability_check(
    mu: f64,
    lambda_min: f64,
    lambda_max: f64,
    nc: &NoiseConstants,
) -> StabilityReport {
    let stationary_limit = stationary_step_limit(lambda_min, lambda_max, nc.alpha);
    let tracking_limit = tracking_step_limit(nc, lambda_min, lambda_max);
    let stationary_ok = mu > 0.0 && mu < stationary_limit;
    let tracking_ok = mu > 0.0 && mu < tracking_limit;
    let mut warnings = Vec::new();
    if !stationary_ok {
        warnings.push(format!(
            "step size {mu} outside the stationary stability range (0, {stationary_limit}); \
             the per-node excess-risk bound does not apply"
        ));
    }
    if !tracking_ok {
        warnings.push(format!(
            "step size {mu} outside the tracking range (0, {tracking_limit}); \
             the drift excess-risk bound does not apply"
        ));
    }
    StabilityReport {
        mu,
        stationary_limit,
        tracking_limit,
        stationary_ok,
        tracking_ok,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{metropolis_weights, Network};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let h = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Sample::new(h, y)
            })
            .collect()
    }

    fn ring_metropolis(n: usize) -> DMatrix<f64> {
        metropolis_weights(&Network::ring(n).unwrap()).unwrap()
    }

    #[test]
    fn identity_matrices_give_independent_sgd() {
        let model = RiskModel::logistic(2, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = NetworkState::zeros(3, 2);
        state.weights = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let before = state.clone();
        let samples = random_samples(&mut rng, 3, 2);
        diffusion_step(&mut state, &CombinationSet::identity(3), 0.1, &model, &samples).unwrap();
        for k in 0..3 {
            let g = model.stochastic_gradient(before.node(k), &samples[k]).unwrap();
            for j in 0..2 {
                assert_eq!(state.node(k)[j], before.node(k)[j] - 0.1 * g[j]);
            }
        }
    }

    #[test]
    fn hand_evaluated_two_node_tick() {
        // N = 2, M = 1, square loss with h = 1: gradient at φ is -2(y - φ).
        let a1 = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.4, 0.7]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.8, 0.5, 0.2, 0.5]);
        let c = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]);
        let set = CombinationSet::general(a1, a2, c).unwrap();
        let mut state = NetworkState::zeros(2, 1);
        state.weights = vec![1.0, 2.0];
        let samples = [Sample::new(vec![1.0], 3.0), Sample::new(vec![1.0], -1.0)];
        diffusion_step(&mut state, &set, 0.1, &RiskModel::square(1), &samples).unwrap();
        // φ1 = 0.6 + 0.8 = 1.4, φ2 = 0.3 + 1.4 = 1.7.
        // ψ1 = 1.4 - 0.1(0.5·(-2)(3-1.4) + 0.25·(-2)(-1-1.4)) = 1.44
        // ψ2 = 1.7 - 0.1(0.5·(-2)(3-1.7) + 0.75·(-2)(-1-1.7)) = 1.425
        // w1 = 0.8·1.44 + 0.2·1.425 = 1.437, w2 = 0.5·1.44 + 0.5·1.425 = 1.4325
        assert!((state.weights[0] - 1.437).abs() < 1e-14);
        assert!((state.weights[1] - 1.4325).abs() < 1e-14);
    }

    #[test]
    fn hand_evaluated_consensus_tick() {
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let mut state = NetworkState::zeros(2, 1);
        state.weights = vec![1.0, 2.0];
        let samples = [Sample::new(vec![1.0], 3.0), Sample::new(vec![1.0], -1.0)];
        consensus_step(&mut state, &a, 0.1, &RiskModel::square(1), &samples).unwrap();
        // w1 = 0.7 + 0.6 - 0.1·(-2)(3 - 1) = 1.7; w2 = 0.4 + 1.2 - 0.1·(-2)(-1 - 2) = 1.0
        assert!((state.weights[0] - 1.7).abs() < 1e-14);
        assert!((state.weights[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn consensus_with_identity_is_noncooperative() {
        let model = RiskModel::logistic(2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = NetworkState::zeros(4, 2);
        a.weights = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut b = a.clone();
        for _ in 0..20 {
            let s = random_samples(&mut rng, 4, 2);
            consensus_step(&mut a, &DMatrix::identity(4, 4), 0.2, &model, &s).unwrap();
            diffusion_step(&mut b, &CombinationSet::identity(4), 0.2, &model, &s).unwrap();
        }
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn cfg_with_one_node_is_sgd() {
        let model = RiskModel::logistic(2, 0.5);
        let s = [Sample::new(vec![0.5, -1.0], 1.0)];
        let mut st = NetworkState::zeros(1, 2);
        st.central = vec![0.2, 0.1];
        let g = model.stochastic_gradient(&[0.2, 0.1], &s[0]).unwrap();
        cfg_step(&mut st, 0.3, &model, &s).unwrap();
        assert_eq!(st.central, vec![0.2 - 0.3 * g[0], 0.1 - 0.3 * g[1]]);
    }

    #[test]
    fn cfg_with_identical_samples_matches_a_single_node() {
        let model = RiskModel::logistic(2, 0.5);
        let s = Sample::new(vec![0.5, -1.0], 1.0);
        let mut st = NetworkState::zeros(4, 2);
        st.central = vec![0.25, 0.5];
        cfg_step(&mut st, 0.25, &model, &vec![s.clone(); 4]).unwrap();
        let g = model.stochastic_gradient(&[0.25, 0.5], &s).unwrap();
        assert!((st.central[0] - (0.25 - 0.25 * g[0])).abs() < 1e-15);
        assert!((st.central[1] - (0.5 - 0.25 * g[1])).abs() < 1e-15);
    }

    #[test]
    fn tha_examples() {
        let mut st = NetworkState::zeros(2, 3);
        st.weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(tha_average(&st), vec![0.5, 0.5, 0.0]);
        st.weights = vec![0.3, 0.1, 0.2, 0.3, 0.1, 0.2];
        assert_eq!(tha_average(&st), vec![0.3, 0.1, 0.2]);
    }

    #[test]
    fn tha_does_not_feed_back() {
        let model = RiskModel::logistic(2, 0.1);
        let a = ring_metropolis(5);
        let mut tha = Learner::new(LearnerSpec::from_variant(Variant::Tha, &a, 0.1).unwrap(), 5, 2)
            .unwrap();
        let mut nc =
            Learner::new(LearnerSpec::from_variant(Variant::NonCooperative, &a, 0.1).unwrap(), 5, 2)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let s = random_samples(&mut rng, 5, 2);
            tha.step(&model, &s).unwrap();
            let _ = tha.eval_points();
            nc.step(&model, &s).unwrap();
        }
        assert_eq!(tha.state().weights, nc.state().weights);
        assert_eq!(tha.eval_points()[0], tha_average(nc.state()));
    }

    #[test]
    fn divergence_is_reported() {
        let model = RiskModel::square(1);
        let mut l = Learner::new(
            LearnerSpec::from_variant(Variant::NonCooperative, &DMatrix::identity(1, 1), 5.0).unwrap(),
            1,
            1,
        )
        .unwrap();
        let s = [Sample::new(vec![1.0], 1.0)];
        let err = (0..200).find_map(|_| l.step(&model, &s).err()).unwrap();
        match err {
            EngineError::Divergence { node, mu, time, .. } => {
                assert_eq!((node, mu), (0, 5.0));
                assert!(time > 1);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn inverse_sqrt_is_consensus_only() {
        let a = ring_metropolis(3);
        let mut spec = LearnerSpec::from_variant(Variant::Atc, &a, 0.1).unwrap();
        spec.schedule = Schedule::InverseSqrt;
        assert!(matches!(spec.validate(3, None), Err(EngineError::InvalidSpec { .. })));
        let d = LearnerSpec::from_variant(Variant::ConsensusDiminishing, &a, 0.2).unwrap();
        assert_eq!(d.step_at(4), 0.1);
        assert!(LearnerSpec::from_variant(Variant::Atc, &a, 0.0).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn stability_examples() {
        let nc = NoiseConstants::identity_c(0.0, 1.0, 0.0);
        let r = stability_check(0.5, 1.0, 1.0, &nc);
        assert_eq!(r.stationary_limit, 2.0);
        assert!(r.stationary_ok);
        let r = stability_check(3.0, 1.0, 1.0, &nc);
        assert!(!r.stationary_ok && !r.warnings.is_empty());
        let nc = NoiseConstants {
            alpha: 0.0,
            sigma_v2: 1.0,
            q_trace: 0.0,
            c_norm1: 2.0,
            c_star: 0.5,
        };
        assert!((stability_check(0.01, 1.0, 2.0, &nc).tracking_limit - 0.0625).abs() < 1e-15);
    }

    fn atc_direct(w: &mut [f64], a: &DMatrix<f64>, mu: f64, model: &RiskModel, s: &[Sample], m: usize) {
        let n = a.nrows();
        let mut psi = vec![0.0; n * m];
        for k in 0..n {
            let g = model.stochastic_gradient(&w[k * m..(k + 1) * m], &s[k]).unwrap();
            for j in 0..m {
                psi[k * m + j] = w[k * m + j] - mu * g[j];
            }
        }
        for k in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..n {
                    if a[(l, k)] != 0.0 {
                        acc += a[(l, k)] * psi[l * m + j];
                    }
                }
                w[k * m + j] = acc;
            }
        }
    }

    fn cta_direct(w: &mut [f64], a: &DMatrix<f64>, mu: f64, model: &RiskModel, s: &[Sample], m: usize) {
        let n = a.nrows();
        let mut phi = vec![0.0; n * m];
        for k in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..n {
                    if a[(l, k)] != 0.0 {
                        acc += a[(l, k)] * w[l * m + j];
                    }
                }
                phi[k * m + j] = acc;
            }
        }
        for k in 0..n {
            let g = model.stochastic_gradient(&phi[k * m..(k + 1) * m], &s[k]).unwrap();
            for j in 0..m {
                w[k * m + j] = phi[k * m + j] - mu * g[j];
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn presets_match_direct_transcriptions(n in 2usize..8, seed in any::<u64>()) {
            let net = Network::random_geometric(n, 0.8, seed).unwrap();
            let a = metropolis_weights(&net).unwrap();
            let model = RiskModel::logistic(3, 0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut atc = Learner::new(LearnerSpec::from_variant(Variant::Atc, &a, 0.3).unwrap(), n, 3).unwrap();
            let mut cta = Learner::new(LearnerSpec::from_variant(Variant::Cta, &a, 0.3).unwrap(), n, 3).unwrap();
            let mut nc = Learner::new(LearnerSpec::from_variant(Variant::NonCooperative, &a, 0.3).unwrap(), n, 3).unwrap();
            let (mut wa, mut wc, mut wn) = (vec![0.0; n * 3], vec![0.0; n * 3], vec![0.0; n * 3]);
            let id = DMatrix::identity(n, n);
            for _ in 0..50 {
                let s = random_samples(&mut rng, n, 3);
                atc.step(&model, &s).unwrap();
                cta.step(&model, &s).unwrap();
                nc.step(&model, &s).unwrap();
                atc_direct(&mut wa, &a, 0.3, &model, &s, 3);
                cta_direct(&mut wc, &a, 0.3, &model, &s, 3);
                atc_direct(&mut wn, &id, 0.3, &model, &s, 3);
            }
            prop_assert_eq!(&atc.state().weights, &wa);
            prop_assert_eq!(&cta.state().weights, &wc);
            prop_assert_eq!(&nc.state().weights, &wn);
        }

        #[test]
        fn zero_gradients_preserve_the_network_mean(n in 2usize..9, seed in any::<u64>()) {
            // Square loss on exact zero-residual samples: h = 0 gives no gradient.
            let net = Network::random_geometric(n, 0.8, seed).unwrap();
            let a = metropolis_weights(&net).unwrap();
            let set = CombinationSet::general(a.clone(), a.clone(), a).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = NetworkState::zeros(n, 2);
            st.weights = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean0 = tha_average(&st);
            let zero = vec![Sample::new(vec![0.0, 0.0], 0.0); n];
            for _ in 0..20 {
                diffusion_step(&mut st, &set, 0.5, &RiskModel::square(2), &zero).unwrap();
                let m = tha_average(&st);
                prop_assert!((m[0] - mean0[0]).abs() < 1e-12 && (m[1] - mean0[1]).abs() < 1e-12);
            }
        }

        #[test]
        fn consensus_averaging_contracts_disagreement(n in 2usize..9, seed in any::<u64>()) {
            let net = Network::random_geometric(n, 0.8, seed).unwrap();
            let a = metropolis_weights(&net).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = NetworkState::zeros(n, 2);
            st.weights = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zero = vec![Sample::new(vec![0.0, 0.0], 0.0); n];
            let spread = |st: &NetworkState| {
                let mut d: f64 = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        let x: f64 = st.node(k).iter().zip(st.node(l)).map(|(a, b)| (a - b).powi(2)).sum();
                        d = d.max(x.sqrt());
                    }
                }
                d
            };
            let mut prev = spread(&st);
            for _ in 0..20 {
                consensus_step(&mut st, &a, 0.5, &RiskModel::square(2), &zero).unwrap();
                let cur = spread(&st);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
            }
        }
    }
}
