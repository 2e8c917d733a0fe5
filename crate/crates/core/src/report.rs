//! Theory overlays, standalone predictions, and writing run outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, Resolved};
use crate::drift::{DriftError, DriftSpec, Truth};
use crate::engine::{EngineError, Rule};
use crate::io::{self, FileEntry, IoError, Manifest, OutputDir, TickRecord};
use crate::metrics::{moving_average, MetricTrace, VariantTrace};
use crate::risk::{
    adaline_noise_constants, Env, LossKind, MinimizeOptions, RiskError, RiskModel, Sample,
};
use crate::seed::{self, Stream};
use crate::theory::{
    self, epsilon_bound, optimal_mu, ordering_check, recursion_bound_trace, rv_from_node_covariance,
    simplified_er, stationary_step_limit, steady_state_er, table1_weighting, tracking_bound,
    tracking_step_limit, NoiseConstants, SteadyStateInputs, TheoryError, Weighting,
};
use crate::topology::CombinationSet;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Usage(String),
}

/// Repetition index reserved for theory Monte-Carlo draws.
const THEORY_REP: u64 = u64::MAX;

/// Quantities at the initial optimizer shared by every theory formula.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryContext {
    pub n_nodes: usize,
    pub dim: usize,
    /// Optimizer of the tick-1 distribution.
    pub w_opt: Vec<f64>,
    /// Hessian at `w_opt`, common to all nodes.
    #[serde(skip)]
    pub hessian: Option<DMatrix<f64>>,
    /// Covariance of one node's gradient noise at `w_opt`.
    #[serde(skip)]
    pub node_noise: Option<DMatrix<f64>>,
    /// Trace of `node_noise`.
    pub noise_trace: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub alpha: f64,
    pub sigma_v2: f64,
    /// Whether α and σ_v² are certified rather than fitted.
    pub certified: bool,
    /// Tr(Q) of the optimizer walk; `None` when the drift is not a random walk
    /// on the optimizer.
    pub q_trace: Option<f64>,
    /// Initial optimizer, for the recursion's starting error.
    pub w_start: Vec<f64>,
    /// How expectations were taken.
    pub source: String,
}

impl TheoryContext {
    /// Builds the context. With `full` unset only the noise trace is
    /// computed, which is what the simplified predictor needs.
    pub fn build(r: &Resolved, full: bool) -> Result<Self, ReportError> {
        let exp = &r.experiment;
        let model = &exp.model;
        let n = exp.n_nodes;
        let m = model.dim;
        let master = exp.seed;
        let draws = r.config.theory.noise_draws.max(10);
        let mut rng = seed::rng_for(master, THEORY_REP, Stream::Theory);

        if let DriftSpec::LinearWalk { base, q } = &exp.drift {
            let h = &base.feature_cov * 2.0;
            let eig = h.clone().symmetric_eigenvalues();
            let noise = adaline_noise_constants(base, draws, &mut rng)?;
            let node_noise = &base.feature_cov * (4.0 * base.noise_variance);
            return Ok(TheoryContext {
                n_nodes: n,
                dim: m,
                w_opt: base.optimum.as_slice().to_vec(),
                hessian: Some(h),
                noise_trace: node_noise.trace(),
                node_noise: Some(node_noise),
                lambda_min: eig.min(),
                lambda_max: eig.max(),
                alpha: noise.alpha,
                sigma_v2: noise.sigma_v2,
                certified: true,
                q_trace: Some(q.trace()),
                w_start: base.optimum.as_slice().to_vec(),
                source: "closed form".into(),
            });
        }

        let mut process = exp.drift.start(n, seed::derive(master, &[0]))?;
        let tick = process.next_tick()?;
        let batch: Vec<Sample>;
        let (samples, weights, source): (&[Sample], Option<&[f64]>, String) = match &tick.truth {
            Truth::Discrete {
                samples, weights, ..
            } => (samples.as_slice(), Some(weights.as_slice()), "exact law".into()),
            _ => {
                batch = (0..draws).map(|_| process.draw(&mut rng)).collect();
                (batch.as_slice(), None, format!("{draws} Monte-Carlo draws"))
            }
        };
        let env = match weights {
            Some(w) => Env::Weighted {
                samples,
                weights: w,
            },
            None => Env::Batch(samples),
        };
        let opts = MinimizeOptions {
            tol: exp.metrics.reference_tol,
            ..MinimizeOptions::default()
        };
        let w_opt = model.batch_minimize_with(samples, weights, &opts)?.w;
        let noise_trace = noise_trace(model, &w_opt, samples, weights)?;
        let (lambda_min, lambda_max) = model.hessian_bounds(env)?;
        let mut ctx = TheoryContext {
            n_nodes: n,
            dim: m,
            w_start: w_opt.clone(),
            w_opt,
            hessian: None,
            node_noise: None,
            noise_trace,
            lambda_min,
            lambda_max,
            alpha: 0.0,
            sigma_v2: noise_trace,
            certified: false,
            q_trace: match &exp.drift {
                DriftSpec::GaussianPair { walk_cov, .. } if walk_cov.amax() == 0.0 => Some(0.0),
                DriftSpec::Dataset { .. } => Some(0.0),
                _ => None,
            },
            source,
        };
        if full {
            ctx.hessian = Some(model.hessian(&ctx.w_opt, env)?);
            ctx.node_noise = Some(theory::node_noise_covariance(model, &ctx.w_opt, env)?);
            let scale = ctx.w_opt.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            let radii = [0.25 * scale, 0.5 * scale, scale];
            let fit = theory::fit_noise_constants(model, &ctx.w_opt, env, &radii)?;
            ctx.alpha = fit.alpha;
            ctx.sigma_v2 = fit.sigma_v2;
        }
        Ok(ctx)
    }

    fn hessians(&self) -> Result<Vec<DMatrix<f64>>, TheoryError> {
        let h = self.hessian.clone().ok_or(TheoryError::MissingHessian)?;
        Ok(vec![h; self.n_nodes])
    }

    fn node_noise(&self) -> Result<&DMatrix<f64>, TheoryError> {
        self.node_noise.as_ref().ok_or(TheoryError::MissingHessian)
    }

    /// Tr(Q), or zero for streams without an optimizer walk.
    fn q(&self) -> f64 {
        self.q_trace.unwrap_or(0.0)
    }

    fn constants(&self, c: &DMatrix<f64>) -> NoiseConstants {
        NoiseConstants::new(self.alpha, self.sigma_v2, self.q(), c)
    }

    fn tags(&self) -> Vec<&'static str> {
        let mut t = vec![if self.certified { "certified" } else { "estimated" }];
        match self.q_trace {
            Some(q) if q == 0.0 => t.push("stationary"),
            Some(_) => t.push("random-walk"),
            None => t.push("drift-not-a-random-walk"),
        }
        t
    }
}

/// `E‖∇̂J(w; s)‖² - ‖∇J(w)‖²` over a finite law or a batch.
fn noise_trace(
    model: &RiskModel,
    w: &[f64],
    samples: &[Sample],
    weights: Option<&[f64]>,
) -> Result<f64, RiskError> {
    let n = samples.len() as f64;
    let m = model.dim;
    let mut mean = vec![0.0; m];
    let mut sq = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let p = weights.map_or(1.0 / n, |p| p[i]);
        let g = model.stochastic_gradient(w, s)?;
        sq += p * g.iter().map(|x| x * x).sum::<f64>();
        for (a, b) in mean.iter_mut().zip(&g) {
            *a += p * b;
        }
    }
    Ok((sq - mean.iter().map(|x| x * x).sum::<f64>()).max(0.0))
}

/// Formulas accepted by [`predict`].
pub const FORMULAS: [&str; 9] = [
    "steady-state-er",
    "epsilon-bound",
    "tracking-bound",
    "optimal-mu",
    "step-limits",
    "recursion-bound",
    "simplified-er",
    "ordering",
    "noise-constants",
];

fn diffusion_set<'a>(r: &'a Resolved, learner: Option<&str>) -> Result<(&'a str, &'a CombinationSet, f64), ReportError> {
    let pick = r
        .experiment
        .learners
        .iter()
        .filter(|l| matches!(l.rule, Rule::Diffusion(_)))
        .find(|l| learner.is_none_or(|name| l.name == name));
    match pick {
        Some(l) => match &l.rule {
            Rule::Diffusion(set) => Ok((l.name.as_str(), set, l.step_size)),
            _ => unreachable!(),
        },
        None => Err(ReportError::Usage(match learner {
            Some(name) => format!("no diffusion learner named `{name}`"),
            None => "the configuration has no diffusion learner".into(),
        })),
    }
}

fn steady(ctx: &TheoryContext, set: &CombinationSet, mu: f64, w: Weighting) -> Result<theory::SteadyState, TheoryError> {
    let hessians = ctx.hessians()?;
    let weighting = table1_weighting(w, Some(&hessians), ctx.n_nodes, ctx.dim)?;
    steady_state_er(&SteadyStateInputs {
        a1: set.a1.clone(),
        a2: set.a2.clone(),
        c: set.c.clone(),
        hessians,
        r_v: rv_from_node_covariance(&set.c, ctx.node_noise()?),
        mu,
        weighting,
    })
}

fn simplified_network(ctx: &TheoryContext, c: &DMatrix<f64>, mu: f64) -> f64 {
    let n = ctx.n_nodes;
    (0..n)
        .map(|k| {
            let weight: f64 = c.column(k).iter().map(|x| x * x).sum();
            simplified_er(mu, weight * ctx.noise_trace, n)
        })
        .sum::<f64>()
        / n as f64
}

/// Evaluates one formula for one diffusion learner. `mu` overrides the
/// learner's step size.
pub fn predict(
    r: &Resolved,
    ctx: &TheoryContext,
    formula: &str,
    learner: Option<&str>,
    mu: Option<f64>,
) -> Result<Value, ReportError> {
    let (name, set, learner_mu) = diffusion_set(r, learner)?;
    let mu = mu.unwrap_or(learner_mu);
    let nc = ctx.constants(&set.c);
    let (lmin, lmax) = (ctx.lambda_min, ctx.lambda_max);
    let mut tags: Vec<&str> = ctx.tags();
    let stationary_limit = stationary_step_limit(lmin, lmax, nc.alpha);
    let tracking_limit = tracking_step_limit(&nc, lmin, lmax);
    let body = match formula {
        "steady-state-er" => {
            let s = steady(ctx, set, mu, Weighting::NetworkRisk)?;
            tags.push(if mu < 0.1 * stationary_limit { "small-mu" } else { "moderate-mu" });
            json!({"value": s.value, "spectral_radius": s.spectral_radius, "method": s.method})
        }
        "epsilon-bound" => {
            let e = epsilon_bound(&nc, lmin, lmax, mu);
            tags.push(if e.in_regime { "in-regime" } else { "out-of-regime" });
            json!({"value": e.value, "step_limit": stationary_limit})
        }
        "tracking-bound" => {
            let b = tracking_bound(&nc, lmin, lmax, mu, ctx.dim);
            tags.push(if b.in_regime { "in-regime" } else { "out-of-regime" });
            json!({"value": b.total, "steady": b.steady, "tracking": b.tracking, "constant": b.constant, "step_limit": tracking_limit})
        }
        "optimal-mu" => {
            let v = optimal_mu(&nc)?;
            tags.push(if v < tracking_limit { "in-regime" } else { "out-of-regime" });
            json!({"value": v})
        }
        "step-limits" => {
            tags.push(if mu < stationary_limit.min(tracking_limit) { "in-regime" } else { "out-of-regime" });
            json!({"value": stationary_limit.min(tracking_limit), "stationary": stationary_limit, "tracking": tracking_limit})
        }
        "recursion-bound" => {
            let b = recursion_bound_trace(&nc, lmin, lmax, mu, w0_bound(r, ctx, name), r.config.horizon);
            tags.push(if b.diverging { "out-of-regime" } else { "in-regime" });
            json!({"value": b.values.last().copied(), "beta": b.beta, "limit": b.limit})
        }
        "simplified-er" => {
            tags.push(if mu < 0.1 * stationary_limit { "small-mu" } else { "moderate-mu" });
            json!({"value": simplified_network(ctx, &set.c, mu)})
        }
        "ordering" => {
            let rv = ctx.node_noise()?.clone();
            let rv = theory::kron(&DMatrix::identity(ctx.n_nodes, ctx.n_nodes), &rv);
            let o = ordering_check(&r.combination, &ctx.hessians()?, &rv, mu)?;
            tags.push(if o.holds { "ordering-holds" } else { "ordering-violated" });
            json!({"value": o.atc, "atc": o.atc, "cta": o.cta, "noncooperative": o.noncooperative, "holds": o.holds})
        }
        "noise-constants" => {
            json!({"value": nc.sigma_v2, "alpha": nc.alpha, "sigma_v2": nc.sigma_v2, "q_trace": ctx.q_trace,
                   "lambda_min": lmin, "lambda_max": lmax, "c_norm1": nc.c_norm1, "c_star": nc.c_star})
        }
        other => {
            return Err(ReportError::Usage(format!(
                "unknown formula `{other}`; expected one of {}",
                FORMULAS.join(", ")
            )))
        }
    };
    let mut out = json!({"formula": formula, "learner": name, "mu": mu});
    let obj = out.as_object_mut().expect("object");
    for (k, v) in body.as_object().expect("object") {
        obj.insert(k.clone(), v.clone());
    }
    obj.insert("tags".into(), json!(tags));
    obj.insert("source".into(), json!(ctx.source));
    Ok(out)
}

/// Largest initial squared distance from the optimizer over nodes.
fn w0_bound(r: &Resolved, ctx: &TheoryContext, learner: &str) -> f64 {
    let dist = |w: &[f64]| w.iter().zip(&ctx.w_start).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let spec = r.experiment.learners.iter().find(|l| l.name == learner);
    match spec.and_then(|l| l.initial.as_ref()) {
        Some(init) => init.iter().map(|w| dist(w)).fold(0.0, f64::max),
        None => dist(&vec![0.0; ctx.dim]),
    }
}

/// One theory overlay series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overlay {
    pub learner: String,
    pub metric: String,
    pub values: Vec<f64>,
}

impl Overlay {
    /// File name, with the learner suffixed `:theory`.
    pub fn file_name(&self) -> String {
        format!("{}:theory_{}.csv", self.learner, self.metric)
    }
}

/// Overlays requested by the configuration, with a JSON summary.
pub fn theory_overlays(r: &Resolved, ctx: &TheoryContext) -> Result<(Vec<Overlay>, Value), ReportError> {
    let t = &r.config.theory;
    let horizon = r.config.horizon;
    let mut overlays = Vec::new();
    let mut summary = serde_json::Map::new();
    for l in &r.experiment.learners {
        let Rule::Diffusion(set) = &l.rule else { continue };
        let mut entry = serde_json::Map::new();
        let flat = |metric: &str, v: f64| Overlay {
            learner: l.name.clone(),
            metric: metric.into(),
            values: vec![v; horizon],
        };
        let nc = ctx.constants(&set.c);
        if t.steady_state {
            match steady(ctx, set, l.step_size, Weighting::NetworkRisk) {
                Ok(s) => {
                    overlays.push(flat("network_er", s.value));
                    entry.insert("steady_state_er".into(), json!(s));
                }
                Err(TheoryError::UnstableB { radius }) => {
                    entry.insert("steady_state_er".into(), json!({"refused": "unstable", "spectral_radius": radius}));
                }
                Err(e) => return Err(e.into()),
            }
        }
        if t.simplified {
            let v = simplified_network(ctx, &set.c, l.step_size);
            overlays.push(flat("simplified_er", v));
            entry.insert("simplified_er".into(), json!(v));
        }
        if t.bounds {
            let (lmin, lmax) = (ctx.lambda_min, ctx.lambda_max);
            if ctx.q() > 0.0 {
                let b = tracking_bound(&nc, lmin, lmax, l.step_size, ctx.dim);
                overlays.push(flat("er_bound", b.total));
                entry.insert("tracking_bound".into(), json!(b));
            } else {
                let e = epsilon_bound(&nc, lmin, lmax, l.step_size);
                overlays.push(flat("er_bound", e.value));
                entry.insert("epsilon_bound".into(), json!(e));
            }
            entry.insert(
                "step_limits".into(),
                json!({"stationary": stationary_step_limit(lmin, lmax, nc.alpha),
                       "tracking": tracking_step_limit(&nc, lmin, lmax)}),
            );
        }
        if t.recursion {
            let b = recursion_bound_trace(
                &nc,
                ctx.lambda_min,
                ctx.lambda_max,
                l.step_size,
                w0_bound(r, ctx, &l.name),
                horizon,
            );
            entry.insert("recursion".into(), json!({"beta": b.beta, "limit": b.limit, "diverging": b.diverging}));
            overlays.push(Overlay {
                learner: l.name.clone(),
                metric: "max_node_filtering_mse".into(),
                values: b.values,
            });
        }
        summary.insert(l.name.clone(), Value::Object(entry));
    }
    let out = json!({"context": ctx, "tags": ctx.tags(), "learners": summary});
    Ok((overlays, out))
}

/// Whether the configuration asks for any overlay.
pub fn wants_theory(r: &Resolved) -> bool {
    let t = &r.config.theory;
    t.steady_state || t.bounds || t.recursion || t.simplified
}

fn write_variant(out: &mut OutputDir, v: &VariantTrace, r: &Resolved) -> Result<(), IoError> {
    let name = &v.name;
    out.write(&format!("{name}_network_er.csv"), io::series_csv(&v.network_er).as_bytes())?;
    out.write(&format!("{name}_prediction_mse.csv"), io::series_csv(&v.prediction_mse).as_bytes())?;
    out.write(&format!("{name}_filtering_mse.csv"), io::series_csv(&v.filtering_mse).as_bytes())?;
    // Max over nodes of the mean, with the standard error of the maximizing node.
    let means: Vec<Vec<f64>> = v.node_filtering_mse.iter().map(|s| s.mean()).collect();
    let ses: Vec<Vec<f64>> = v.node_filtering_mse.iter().map(|s| s.std_error()).collect();
    let (mut mx, mut se) = (Vec::new(), Vec::new());
    for i in 0..v.filtering_mse.len() {
        let k = (0..means.len())
            .max_by(|&a, &b| means[a][i].total_cmp(&means[b][i]))
            .unwrap_or(0);
        mx.push(means.get(k).map_or(0.0, |m| m[i]));
        se.push(ses.get(k).map_or(0.0, |s| s[i]));
    }
    out.write(&format!("{name}_max_node_filtering_mse.csv"), io::rows_csv(&mx, &se).as_bytes())?;
    if let Some(acc) = &v.accuracy {
        out.write(&format!("{name}_accuracy.csv"), io::series_csv(acc).as_bytes())?;
        let w = r.config.metrics.moving_average;
        if w > 1 {
            let ma = moving_average(&acc.mean(), w);
            let zeros = vec![0.0; ma.len()];
            out.write(&format!("{name}_accuracy_ma{w}.csv"), io::rows_csv(&ma, &zeros).as_bytes())?;
        }
    }
    if !v.auc.is_empty() {
        let mut s = String::from("tick,mean,stderr\n");
        for (tick, series) in &v.auc {
            s.push_str(&format!("{},{},{}\n", tick, series.mean()[0], series.std_error()[0]));
        }
        out.write(&format!("{name}_auc.csv"), s.as_bytes())?;
    }
    for (tick, roc) in &v.roc {
        out.write(&format!("{name}_roc_t{tick}.csv"), io::roc_csv(roc).as_bytes())?;
    }
    if r.config.metrics.node_series {
        for (k, s) in v.node_er.iter().enumerate() {
            out.write(&format!("{name}_node{k}_er.csv"), io::series_csv(s).as_bytes())?;
        }
    }
    Ok(())
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: MetricTrace,
    pub manifest: PathBuf,
    pub files: Vec<FileEntry>,
}

/// Runs the experiment and writes every output plus `manifest.json`.
pub fn run_to_dir(
    r: &Resolved,
    out_root: &Path,
    threads: Option<usize>,
    command: &str,
) -> Result<RunOutcome, ReportError> {
    let start = Instant::now();
    let trace = r.experiment.run(threads)?;
    let mut out = OutputDir::create(out_root)?;
    out.write("config.resolved.toml", r.config.to_toml().as_bytes())?;
    for v in &trace.variants {
        write_variant(&mut out, v, r)?;
    }
    if wants_theory(r) {
        let t = &r.config.theory;
        let ctx = TheoryContext::build(r, t.steady_state || t.bounds || t.recursion)?;
        let (overlays, summary) = theory_overlays(r, &ctx)?;
        for o in &overlays {
            let zeros = vec![0.0; o.values.len()];
            out.write(&o.file_name(), io::rows_csv(&o.values, &zeros).as_bytes())?;
        }
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        out.write("theory.json", text.as_bytes())?;
    }
    let mut notes = BTreeMap::new();
    notes.insert(
        "sampling".into(),
        "all learners see identical samples at every tick of a repetition".into(),
    );
    notes.insert(
        "evaluation".into(),
        "risk and accuracy use w_{i-1}; filtering MSE uses w_i".into(),
    );
    notes.insert("model".into(), r.experiment.model.to_string());
    notes.insert("topology".into(), r.config.network.topology.clone());
    let manifest = Manifest {
        tool: "diffadapt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config_hash: r.config.hash(),
        seed: r.experiment.seed,
        repetitions: r.experiment.repetitions,
        horizon: r.experiment.horizon,
        threads,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        notes,
        files: Vec::new(),
    };
    let files = out.entries()?;
    let manifest = out.finish(manifest)?;
    Ok(RunOutcome {
        trace,
        manifest,
        files,
    })
}

/// The first `ticks` ticks of repetition `rep`, one record per node.
pub fn stream_records(r: &Resolved, rep: u64, ticks: usize) -> Result<Vec<TickRecord>, ReportError> {
    let exp = &r.experiment;
    let mut process = exp.drift.start(exp.n_nodes, seed::derive(exp.seed, &[rep]))?;
    let mut out = Vec::with_capacity(ticks * exp.n_nodes);
    for _ in 0..ticks {
        let tick = process.next_tick()?;
        for (k, s) in tick.samples.into_iter().enumerate() {
            out.push(TickRecord {
                tick: tick.time,
                node: k,
                features: s.features,
                label: s.label,
                optimizer: tick.optimizer.clone(),
            });
        }
    }
    Ok(out)
}

/// Whether the model is the square loss.
pub fn is_square(model: &RiskModel) -> bool {
    matches!(model.kind, LossKind::Square)
}
