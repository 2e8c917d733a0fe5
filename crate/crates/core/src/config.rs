//! Declarative experiment configuration, shipped presets, and resolution
//! into runnable objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drift::DriftSpec;
use crate::engine::{EvalMode, Experiment, LearnerSpec, MetricOptions, Rule, Schedule, Variant};
use crate::io;
use crate::risk::{LinearModel, RiskModel};
use crate::topology::{metropolis_weights, CombinationSet, Network, TopologySpec};

/// Errors raised while reading or validating a configuration.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("unknown preset `{0}`; available: {1}")]
    UnknownPreset(String, String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error(transparent)]
    Data(#[from] io::IoError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.to_string(),
        reason: reason.into(),
    }
}

const PRESETS: [(&str, &str); 8] = [
    ("paper:stagger", include_str!("../presets/stagger.toml")),
    ("paper:rw-gauss", include_str!("../presets/rw-gauss.toml")),
    ("paper:a9a", include_str!("../presets/a9a.toml")),
    ("paper:alpha", include_str!("../presets/alpha.toml")),
    ("paper:webspam", include_str!("../presets/webspam.toml")),
    ("paper:webspam-small-mu", include_str!("../presets/webspam-small-mu.toml")),
    ("demo:adaline", include_str!("../presets/adaline.toml")),
    ("demo:adaline-tracking", include_str!("../presets/adaline-tracking.toml")),
];

/// Names of the shipped presets.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Text of a shipped preset.
pub fn preset_text(name: &str) -> Result<&'static str, ConfigError> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string(), preset_names().join(", ")))
}

fn default_eval_batch() -> usize {
    2000
}

fn default_window() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-8
}

fn default_noise_draws() -> usize {
    100_000
}

/// Top-level configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; required before running.
    pub seed: Option<u64>,
    pub horizon: usize,
    pub repetitions: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Default step size for learners that do not set their own.
    pub step_size: Option<f64>,
    pub output: Option<PathBuf>,
    pub network: NetworkConfig,
    pub drift: DriftConfig,
    pub risk: RiskConfig,
    pub learners: Vec<LearnerConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// `ring:N`, `complete:N`, `random-geometric:N:RADIUS:SEED`, or an
    /// edge-list path.
    pub topology: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    /// `stationary-gauss`, `rw-mean`, `stationary-linear`, `rw-opt`,
    /// `stagger` or `dataset`.
    pub kind: String,
    #[serde(default)]
    pub label_noise: f64,
    /// STAGGER: repeat the concept sequence past its horizon.
    #[serde(default)]
    pub cycle: bool,
    /// Gaussian classes: initial mean of the positive class.
    pub initial_mean: Option<Vec<f64>>,
    /// Gaussian classes: per-coordinate variance of the mean's walk.
    pub walk_variance: Option<f64>,
    /// Linear model: feature covariance.
    pub feature_cov: Option<Vec<Vec<f64>>>,
    /// Linear model: initial optimizer.
    pub optimum: Option<Vec<f64>>,
    pub noise_variance: Option<f64>,
    /// Linear model: trace of the walk covariance `Q = (Tr Q / M) I`.
    pub q_trace: Option<f64>,
    /// Dataset: LIBSVM file.
    pub path: Option<PathBuf>,
    /// Dataset: number of attributes.
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    /// `logistic:rho=<value>` or `square`.
    pub model: String,
    pub feature_norm_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub variant: String,
    pub name: Option<String>,
    pub step_size: Option<f64>,
    /// `constant` or `inverse-sqrt`; consensus only.
    pub schedule: Option<String>,
    /// Explicit matrices for the general variant.
    pub a1: Option<Vec<Vec<f64>>>,
    pub a2: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
    /// Initial weight shared by every node.
    pub initial: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub roc_ticks: Vec<usize>,
    /// `auto` or `batch`.
    #[serde(default)]
    pub eval: Option<String>,
    #[serde(default = "default_window")]
    pub reference_window: usize,
    #[serde(default = "default_tol")]
    pub reference_tol: f64,
    /// Also emit a trailing moving average of accuracy over this many ticks.
    #[serde(default)]
    pub moving_average: usize,
    /// Emit per-node excess-risk files.
    #[serde(default)]
    pub node_series: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            roc_ticks: Vec::new(),
            eval: None,
            reference_window: default_window(),
            reference_tol: default_tol(),
            moving_average: 0,
            node_series: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Steady-state excess risk for every diffusion learner.
    #[serde(default)]
    pub steady_state: bool,
    /// Step-size limits and excess-risk bounds.
    #[serde(default)]
    pub bounds: bool,
    /// Per-tick bound on the largest node filtering MSE.
    #[serde(default)]
    pub recursion: bool,
    /// `μ Tr(R_v,k) / (4N)`.
    #[serde(default)]
    pub simplified: bool,
    /// Monte-Carlo draws for noise constants and covariances.
    #[serde(default = "default_noise_draws")]
    pub noise_draws: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            steady_state: false,
            bounds: false,
            recursion: false,
            simplified: false,
            noise_draws: default_noise_draws(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text; `origin` names the source in errors.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        Self::from_toml(preset_text(name)?, name)
    }

    /// Canonical TOML of the configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`to_toml`](Self::to_toml), hex encoded.
    pub fn hash(&self) -> String {
        io::hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Replaces the learner list with default-configured variants.
    pub fn set_learners(&mut self, names: &[&str]) {
        self.learners = names
            .iter()
            .map(|v| LearnerConfig {
                variant: v.to_string(),
                name: None,
                step_size: None,
                schedule: None,
                a1: None,
                a2: None,
                c: None,
                initial: None,
            })
            .collect();
    }

    /// Checks every constraint that does not need the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed.is_none() {
            return Err(invalid("seed", "a master seed is required"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions", "must be at least 1"));
        }
        if self.learners.is_empty() {
            return Err(invalid("learners", "at least one learner is required"));
        }
        self.network
            .topology
            .parse::<TopologySpec>()
            .map_err(|e| invalid("network.topology", e.to_string()))?;
        self.risk
            .model
            .parse::<RiskModel>()
            .map_err(|e| invalid("risk.model", e.to_string()))?;
        for (i, l) in self.learners.iter().enumerate() {
            let field = format!("learners[{i}]");
            l.variant
                .parse::<Variant>()
                .map_err(|e| invalid(&field, e.to_string()))?;
            let mu = l.step_size.or(self.step_size);
            match mu {
                Some(mu) if mu > 0.0 && mu.is_finite() => {}
                Some(mu) => return Err(invalid(&field, format!("step size {mu} must be positive"))),
                None => return Err(invalid(&field, "no step size given")),
            }
            if let Some(s) = &l.schedule {
                parse_schedule(s).map_err(|r| invalid(&field, r))?;
            }
        }
        if let Some(e) = &self.metrics.eval {
            parse_eval(e).map_err(|r| invalid("metrics.eval", r))?;
        }
        if self.metrics.roc_ticks.iter().any(|&t| t == 0 || t > self.horizon) {
            return Err(invalid("metrics.roc_ticks", "ticks must lie in 1..=horizon"));
        }
        if !(0.0..=1.0).contains(&self.drift.label_noise) {
            return Err(invalid("drift.label_noise", "must lie in [0, 1]"));
        }
        match self.drift.kind.as_str() {
            "stationary-gauss" | "rw-mean" | "stationary-linear" | "rw-opt" | "stagger" => {}
            "dataset" => {
                if self.drift.path.is_none() {
                    return Err(invalid("drift.path", "dataset streams need a LIBSVM file"));
                }
            }
            other => return Err(invalid("drift.kind", format!("unknown stream `{other}`"))),
        }
        Ok(())
    }

    /// Validates, reads referenced files and builds the experiment.
    /// Relative paths are resolved against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<Resolved, ConfigError> {
        self.validate()?;
        let spec: TopologySpec = self.network.topology.parse().expect("validated");
        let network = spec
            .build(base)
            .map_err(|e| invalid("network.topology", e.to_string()))?;
        let a = metropolis_weights(&network).map_err(|e| invalid("network.topology", e.to_string()))?;
        let n = network.n_nodes();
        let drift = self.build_drift(base)?;
        let model: RiskModel = self.risk.model.parse().expect("validated");
        let mut model = model.with_dim(drift.dim());
        if let Some(b) = self.risk.feature_norm_bound {
            model = model.with_feature_norm_bound(b);
        }
        if drift.is_regression() != matches!(model.kind, crate::risk::LossKind::Square) {
            return Err(invalid(
                "risk.model",
                "square loss pairs with linear streams, logistic loss with labeled streams",
            ));
        }
        let learners = self
            .learners
            .iter()
            .enumerate()
            .map(|(i, l)| self.build_learner(i, l, &a, n, model.dim))
            .collect::<Result<Vec<_>, _>>()?;
        let experiment = Experiment {
            n_nodes: n,
            model,
            drift,
            learners,
            horizon: self.horizon,
            repetitions: self.repetitions,
            eval_batch: self.eval_batch,
            seed: self.seed.expect("validated"),
            metrics: MetricOptions {
                eval: self.metrics.eval.as_deref().map_or(Ok(EvalMode::Auto), parse_eval)
                    .map_err(|r| invalid("metrics.eval", r))?,
                roc_ticks: self.metrics.roc_ticks.clone(),
                reference_window: self.metrics.reference_window,
                reference_tol: self.metrics.reference_tol,
                ..MetricOptions::default()
            },
        };
        experiment
            .validate()
            .map_err(|e| invalid("experiment", e.to_string()))?;
        Ok(Resolved {
            config: self.clone(),
            network,
            combination: a,
            experiment,
        })
    }

    fn build_drift(&self, base: Option<&Path>) -> Result<DriftSpec, ConfigError> {
        let d = &self.drift;
        let need = |v: Option<f64>, f: &str| v.ok_or_else(|| invalid(f, "required for this stream"));
        let linear = || -> Result<LinearModel, ConfigError> {
            let cov = d
                .feature_cov
                .as_ref()
                .ok_or_else(|| invalid("drift.feature_cov", "required for linear streams"))?;
            let cov = matrix(cov).map_err(|r| invalid("drift.feature_cov", r))?;
            let m = cov.nrows();
            let opt = d.optimum.clone().unwrap_or_else(|| vec![0.0; m]);
            LinearModel::new(
                cov,
                DVector::from_vec(opt),
                need(d.noise_variance, "drift.noise_variance")?,
            )
            .map_err(|e| invalid("drift", e.to_string()))
        };
        let spec = match d.kind.as_str() {
            "stationary-gauss" | "rw-mean" => {
                let mean = d.initial_mean.clone().unwrap_or_else(|| vec![1.0, 1.0]);
                let var = if d.kind == "rw-mean" {
                    need(d.walk_variance, "drift.walk_variance")?
                } else {
                    0.0
                };
                let m = mean.len();
                DriftSpec::GaussianPair {
                    initial_mean: mean,
                    walk_cov: DMatrix::identity(m, m) * var,
                    label_noise: d.label_noise,
                }
            }
            "stationary-linear" | "rw-opt" => {
                let base = linear()?;
                let m = base.dim();
                let trq = if d.kind == "rw-opt" {
                    need(d.q_trace, "drift.q_trace")?
                } else {
                    0.0
                };
                DriftSpec::LinearWalk {
                    base,
                    q: DMatrix::identity(m, m) * (trq / m as f64),
                }
            }
            "stagger" => DriftSpec::Stagger {
                label_noise: d.label_noise,
                cycle: d.cycle,
            },
            "dataset" => {
                let p = d.path.as_ref().expect("validated");
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let samples = io::load_libsvm(&path, d.dim)?;
                DriftSpec::Dataset {
                    samples: Arc::new(samples),
                }
            }
            _ => unreachable!("validated"),
        };
        spec.validate().map_err(|e| invalid("drift", e.to_string()))?;
        Ok(spec)
    }

    fn build_learner(
        &self,
        i: usize,
        l: &LearnerConfig,
        a: &DMatrix<f64>,
        n: usize,
        dim: usize,
    ) -> Result<LearnerSpec, ConfigError> {
        let field = format!("learners[{i}]");
        let variant: Variant = l.variant.parse().expect("validated");
        let mu = l.step_size.or(self.step_size).expect("validated");
        let mut spec =
            LearnerSpec::from_variant(variant, a, mu).map_err(|e| invalid(&field, e.to_string()))?;
        if variant == Variant::GeneralDiffusion {
            let get = |m: &Option<Vec<Vec<f64>>>, name: &str| match m {
                Some(rows) => matrix(rows).map_err(|r| invalid(&format!("{field}.{name}"), r)),
                None => Ok(a.clone()),
            };
            let set = CombinationSet::general(get(&l.a1, "a1")?, get(&l.a2, "a2")?, get(&l.c, "c")?)
                .map_err(|e| invalid(&field, e.to_string()))?;
            spec.rule = Rule::Diffusion(set);
        } else if l.a1.is_some() || l.a2.is_some() || l.c.is_some() {
            return Err(invalid(&field, "explicit matrices need the `general` variant"));
        }
        if let Some(s) = &l.schedule {
            spec.schedule = parse_schedule(s).map_err(|r| invalid(&field, r))?;
        }
        if let Some(w0) = &l.initial {
            spec.initial = Some(vec![w0.clone(); n]);
        }
        if let Some(name) = &l.name {
            spec.name = name.clone();
        }
        spec.validate(n, Some(dim))
            .map_err(|e| invalid(&field, e.to_string()))?;
        Ok(spec)
    }
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "constant" => Ok(Schedule::Constant),
        "inverse-sqrt" => Ok(Schedule::InverseSqrt),
        other => Err(format!("unknown schedule `{other}`")),
    }
}

fn parse_eval(s: &str) -> Result<EvalMode, String> {
    match s {
        "auto" => Ok(EvalMode::Auto),
        "batch" => Ok(EvalMode::Batch),
        other => Err(format!("unknown evaluation mode `{other}`")),
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err("rows must be nonempty and of equal length".into());
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// A validated configuration with its built objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub network: Network,
    /// Metropolis combination matrix of the network.
    pub combination: DMatrix<f64>,
    pub experiment: Experiment,
}
