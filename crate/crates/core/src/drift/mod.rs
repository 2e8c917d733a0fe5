//! Data streams whose distribution is stationary, drifts gradually, or
//! switches abruptly, together with the trajectory of the true optimizer.
//!
//! Every node draws from the same distribution at a given tick, so the
//! optimizer `w°_i` is shared across the network. Tick `i` uses the parameter
//! after its `i`-th random-walk increment.

mod reference;
pub mod stagger;

pub use reference::{reference_optimizer, ReferenceTracker};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::risk::{psd_sqrt, LinearModel, RiskError, Sample};
use crate::seed::{self, Stream};

/// Errors raised by stream construction and advancement.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriftError {
    #[error("tick {tick} is past the {horizon}-tick horizon of a non-cycling stream")]
    TickBeyondHorizon { tick: usize, horizon: usize },
    #[error("invalid drift parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown drift selector `{0}`")]
    UnknownSelector(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// Parameters of a stream, independent of any random state.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftSpec {
    /// Two classes `N(±m_i, I)` with a Gaussian random walk on `m_i`.
    /// A zero walk covariance gives the stationary problem.
    GaussianPair {
        initial_mean: Vec<f64>,
        walk_cov: DMatrix<f64>,
        label_noise: f64,
    },
    /// Linear model `y = hᵀw°_i + z` with `w°_i = w°_{i-1} + q_i`,
    /// `q_i ~ N(0, Q)`.
    LinearWalk {
        base: LinearModel,
        q: DMatrix<f64>,
    },
    /// STAGGER concepts with uniform features.
    Stagger { label_noise: f64, cycle: bool },
    /// A finite dataset split into one shard per node; each node reads its
    /// shard in order, wrapping around.
    Dataset { samples: Arc<Vec<Sample>> },
}

impl DriftSpec {
    /// Feature dimension.
    pub fn dim(&self) -> usize {
        match self {
            DriftSpec::GaussianPair { initial_mean, .. } => initial_mean.len(),
            DriftSpec::LinearWalk { base, .. } => base.dim(),
            DriftSpec::Stagger { .. } => 3,
            DriftSpec::Dataset { samples } => samples.first().map_or(0, |s| s.features.len()),
        }
    }

    /// Whether labels are real-valued rather than ±1.
    pub fn is_regression(&self) -> bool {
        matches!(self, DriftSpec::LinearWalk { .. })
    }

    /// Checks parameter domains.
    pub fn validate(&self) -> Result<(), DriftError> {
        let bad = |m: &str| Err(DriftError::InvalidParameter(m.to_string()));
        match self {
            DriftSpec::GaussianPair {
                initial_mean,
                walk_cov,
                label_noise,
            } => {
                check_noise(*label_noise)?;
                let m = initial_mean.len();
                if m == 0 {
                    return bad("initial mean must be nonempty");
                }
                check_cov(walk_cov, m, "walk covariance")
            }
            DriftSpec::LinearWalk { base, q } => check_cov(q, base.dim(), "Q"),
            DriftSpec::Stagger { label_noise, .. } => check_noise(*label_noise),
            DriftSpec::Dataset { samples } => {
                let Some(first) = samples.first() else {
                    return bad("dataset is empty");
                };
                let m = first.features.len();
                if samples.iter().any(|s| s.features.len() != m) {
                    return bad("dataset rows have differing dimensions");
                }
                Ok(())
            }
        }
    }

    /// Starts a stream for `n_nodes` nodes. Distinct seeds give independent
    /// streams; equal seeds give bit-identical streams.
    pub fn start(&self, n_nodes: usize, seed: u64) -> Result<DriftProcess, DriftError> {
        self.validate()?;
        if n_nodes == 0 {
            return Err(DriftError::InvalidParameter("n_nodes must be positive".into()));
        }
        let rng = |s| seed::rng_for(seed, 0, s);
        let state = match self {
            DriftSpec::GaussianPair {
                initial_mean,
                walk_cov,
                ..
            } => State::Vector {
                current: initial_mean.clone(),
                walk_sqrt: psd_sqrt(walk_cov).expect("validated"),
            },
            DriftSpec::LinearWalk { base, q } => State::Vector {
                current: base.optimum.as_slice().to_vec(),
                walk_sqrt: psd_sqrt(q).expect("validated"),
            },
            DriftSpec::Stagger { .. } => State::None,
            DriftSpec::Dataset { samples } => {
                let mut order: Vec<usize> = (0..samples.len()).collect();
                order.shuffle(&mut rng(Stream::Shuffle));
                State::Shards {
                    order,
                    cursor: vec![0; n_nodes],
                }
            }
        };
        Ok(DriftProcess {
            spec: self.clone(),
            n_nodes,
            eval_size: 0,
            time: 0,
            state,
            data_rng: rng(Stream::Data),
            eval_rng: rng(Stream::Eval),
            walk_rng: rng(Stream::Walk),
            exact_cache: None,
        })
    }
}

fn check_noise(p: f64) -> Result<(), DriftError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DriftError::InvalidParameter(format!(
            "label noise {p} outside [0, 1]"
        )))
    }
}

fn check_cov(m: &DMatrix<f64>, dim: usize, name: &str) -> Result<(), DriftError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(DriftError::InvalidParameter(format!(
            "{name} must be {dim}x{dim}"
        )));
    }
    if psd_sqrt(m).is_none() {
        return Err(DriftError::InvalidParameter(format!(
            "{name} must be symmetric positive semidefinite"
        )));
    }
    Ok(())
}

/// Two-Gaussian stream with a random-walk mean.
pub fn gaussian_pair_stream(
    mean_walk_cov: DMatrix<f64>,
    n_nodes: usize,
    label_noise: f64,
    seed: u64,
) -> Result<DriftProcess, DriftError> {
    DriftSpec::GaussianPair {
        initial_mean: vec![1.0; mean_walk_cov.nrows()],
        walk_cov: mean_walk_cov,
        label_noise,
    }
    .start(n_nodes, seed)
}

/// Linear-model stream whose optimizer follows a random walk with increment
/// covariance `q`.
pub fn random_walk_optimizer(
    base: LinearModel,
    q: DMatrix<f64>,
    n_nodes: usize,
    seed: u64,
) -> Result<DriftProcess, DriftError> {
    DriftSpec::LinearWalk { base, q }.start(n_nodes, seed)
}

/// STAGGER stream that stops after the last concept.
pub fn stagger_stream(
    n_nodes: usize,
    label_noise: f64,
    seed: u64,
) -> Result<DriftProcess, DriftError> {
    DriftSpec::Stagger {
        label_noise,
        cycle: false,
    }
    .start(n_nodes, seed)
}

/// What is known about the distribution at a tick.
#[derive(Debug, Clone)]
pub enum Truth {
    /// Closed-form Gaussian linear model.
    Linear(LinearModel),
    /// A finite support with probabilities. `version` changes exactly when
    /// the distribution changes.
    Discrete {
        samples: Arc<Vec<Sample>>,
        weights: Arc<Vec<f64>>,
        version: u64,
    },
    /// Only samples are available.
    Unknown,
}

/// Everything emitted at one tick.
#[derive(Debug, Clone)]
pub struct StreamTick {
    /// Tick index, starting at 1.
    pub time: usize,
    /// One sample per node, in node order.
    pub samples: Vec<Sample>,
    /// Exact optimizer when known in closed form.
    pub optimizer: Option<Vec<f64>>,
    /// Fresh samples from the same distribution, independent of `samples`.
    pub eval_batch: Vec<Sample>,
    pub truth: Truth,
}

#[derive(Debug, Clone)]
enum State {
    None,
    Vector {
        current: Vec<f64>,
        walk_sqrt: DMatrix<f64>,
    },
    Shards {
        order: Vec<usize>,
        cursor: Vec<usize>,
    },
}

/// A running stream. Owns its random state.
#[derive(Debug, Clone)]
pub struct DriftProcess {
    spec: DriftSpec,
    n_nodes: usize,
    eval_size: usize,
    time: usize,
    state: State,
    data_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    walk_rng: ChaCha8Rng,
    exact_cache: Option<(u64, Arc<Vec<Sample>>, Arc<Vec<f64>>)>,
}

impl DriftProcess {
    /// Sets the number of evaluation samples emitted per tick.
    pub fn with_eval_batch(mut self, size: usize) -> Self {
        self.eval_size = size;
        self
    }

    pub fn spec(&self) -> &DriftSpec {
        &self.spec
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Index of the last emitted tick (0 before the first).
    pub fn time(&self) -> usize {
        self.time
    }

    /// Current drifting parameter: the class mean or the optimizer.
    pub fn current_parameter(&self) -> Option<&[f64]> {
        match &self.state {
            State::Vector { current, .. } => Some(current),
            _ => None,
        }
    }

    /// Advances to the next tick.
    pub fn next_tick(&mut self) -> Result<StreamTick, DriftError> {
        let tick = self.time + 1;
        if let DriftSpec::Stagger { cycle: false, .. } = self.spec {
            if tick > stagger::HORIZON {
                return Err(DriftError::TickBeyondHorizon {
                    tick,
                    horizon: stagger::HORIZON,
                });
            }
        }
        self.time = tick;
        if let State::Vector { current, walk_sqrt } = &mut self.state {
            let m = current.len();
            let g = DVector::from_fn(m, |_, _| self.walk_rng.sample::<f64, _>(StandardNormal));
            let inc = &*walk_sqrt * g;
            for (c, d) in current.iter_mut().zip(inc.iter()) {
                *c += d;
            }
        }
        let samples = match &mut self.state {
            State::Shards { order, cursor } => {
                let DriftSpec::Dataset { samples: data } = &self.spec else {
                    unreachable!()
                };
                let n = self.n_nodes;
                let total = order.len();
                (0..n)
                    .map(|k| {
                        let (start, end) = (k * total / n, (k + 1) * total / n);
                        // More nodes than samples: nodes share the whole set.
                        let idx = if end > start {
                            order[start + cursor[k] % (end - start)]
                        } else {
                            order[(k + cursor[k]) % total]
                        };
                        cursor[k] += 1;
                        data[idx].clone()
                    })
                    .collect()
            }
            _ => {
                let mut rng = self.data_rng.clone();
                let out = (0..self.n_nodes).map(|_| self.draw(&mut rng)).collect();
                self.data_rng = rng;
                out
            }
        };
        let mut eval_rng = self.eval_rng.clone();
        let eval_batch = (0..self.eval_size).map(|_| self.draw(&mut eval_rng)).collect();
        self.eval_rng = eval_rng;
        Ok(StreamTick {
            time: tick,
            samples,
            optimizer: self.exact_optimizer(),
            eval_batch,
            truth: self.truth(),
        })
    }

    /// Draws one sample from the distribution of the current tick.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        match (&self.spec, &self.state) {
            (DriftSpec::GaussianPair { label_noise, .. }, State::Vector { current, .. }) => {
                let y: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let h = current
                    .iter()
                    .map(|m| y * m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Sample::new(h, flip(y, *label_noise, rng))
            }
            (DriftSpec::LinearWalk { base, .. }, State::Vector { current, .. }) => {
                let h = base.draw_features(rng);
                let z: f64 = rng.sample::<f64, _>(StandardNormal) * base.noise_variance.sqrt();
                let y = h.iter().zip(current).map(|(a, b)| a * b).sum::<f64>() + z;
                Sample::new(h, y)
            }
            (DriftSpec::Stagger { label_noise, .. }, _) => {
                let h: Vec<f64> = (0..3).map(|_| stagger::LEVELS[rng.random_range(0..3)]).collect();
                let c = stagger::concept_at(self.time);
                let y = if stagger::concept_label(c, &h) { 1.0 } else { -1.0 };
                Sample::new(h, flip(y, *label_noise, rng))
            }
            (DriftSpec::Dataset { samples }, _) => samples[rng.random_range(0..samples.len())].clone(),
            _ => unreachable!("state matches spec by construction"),
        }
    }

    fn exact_optimizer(&self) -> Option<Vec<f64>> {
        match (&self.spec, &self.state) {
            (DriftSpec::LinearWalk { .. }, State::Vector { current, .. }) => Some(current.clone()),
            _ => None,
        }
    }

    /// Exact description of the current distribution, when one exists.
    pub fn truth(&mut self) -> Truth {
        match &self.spec {
            DriftSpec::LinearWalk { base, .. } => {
                let w = self.current_parameter().expect("vector state").to_vec();
                Truth::Linear(base.with_optimum(DVector::from_vec(w)))
            }
            DriftSpec::Stagger { label_noise, .. } => {
                let concept = stagger::concept_at(self.time.max(1)) as u64;
                let (samples, weights) = match &self.exact_cache {
                    Some((v, s, w)) if *v == concept => (s.clone(), w.clone()),
                    _ => {
                        let (s, w) = stagger::distribution(concept as usize, *label_noise);
                        let (s, w) = (Arc::new(s), Arc::new(w));
                        self.exact_cache = Some((concept, s.clone(), w.clone()));
                        (s, w)
                    }
                };
                Truth::Discrete {
                    samples,
                    weights,
                    version: concept,
                }
            }
            DriftSpec::Dataset { samples } => {
                let weights = match &self.exact_cache {
                    Some((_, _, w)) => w.clone(),
                    None => {
                        let w = Arc::new(vec![1.0 / samples.len() as f64; samples.len()]);
                        self.exact_cache = Some((0, samples.clone(), w.clone()));
                        w
                    }
                };
                Truth::Discrete {
                    samples: samples.clone(),
                    weights,
                    version: 0,
                }
            }
            DriftSpec::GaussianPair { .. } => Truth::Unknown,
        }
    }
}

fn flip<R: Rng + ?Sized>(y: f64, p: f64, rng: &mut R) -> f64 {
    if p > 0.0 && rng.random::<f64>() < p {
        -y
    } else {
        y
    }
}
