//! Steady-state excess risk as a weighted variance of the network error.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;

use super::{kron, spectral_radius, vec, TheoryError};
use crate::topology::{check_doubly_stochastic, preset_matrices, DiffusionVariant};

/// Largest `N·M` solved through the dense `(NM)² × (NM)²` system.
pub const DENSE_LIMIT: usize = 60;

/// Which weighted error a weighting matrix `T` extracts, with
/// `T_k = ½∇²J_k(w°)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `E_kk ⊗ T_k`: excess risk at node `k`.
    NodeRisk(usize),
    /// `(1/N) diag{T_1, ..., T_N}`: network excess risk.
    NetworkRisk,
    /// `E_kk ⊗ I_M`: mean-square error at node `k`.
    NodeMse(usize),
    /// `(1/N) I_{NM}`: network mean-square error.
    NetworkMse,
}

impl Weighting {
    /// Builds a selector from its name (`node-er`, `network-er`, `node-mse`,
    /// `network-mse`) and an optional node index.
    pub fn parse(name: &str, node: Option<usize>) -> Result<Self, TheoryError> {
        let need = || node.ok_or(TheoryError::MissingNodeIndex);
        match name {
            "node-er" => Ok(Weighting::NodeRisk(need()?)),
            "network-er" => Ok(Weighting::NetworkRisk),
            "node-mse" => Ok(Weighting::NodeMse(need()?)),
            "network-mse" => Ok(Weighting::NetworkMse),
            other => Err(TheoryError::SizeMismatch(format!(
                "unknown weighting `{other}`"
            ))),
        }
    }
}

impl FromStr for Weighting {
    type Err = TheoryError;

    /// Accepts `network-er`, `network-mse`, `node-er:K` or `node-mse:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((name, k)) => {
                let k = k
                    .parse()
                    .map_err(|_| TheoryError::SizeMismatch(format!("bad node index in `{s}`")))?;
                Weighting::parse(name, Some(k))
            }
            None => Weighting::parse(s, None),
        }
    }
}

/// Weighting matrix of size `NM` for `selector`.
pub fn table1_weighting(
    selector: Weighting,
    hessians: Option<&[DMatrix<f64>]>,
    n_nodes: usize,
    dim: usize,
) -> Result<DMatrix<f64>, TheoryError> {
    let mut t = DMatrix::zeros(n_nodes * dim, n_nodes * dim);
    let node_check = |k: usize| {
        if k < n_nodes {
            Ok(k)
        } else {
            Err(TheoryError::SizeMismatch(format!(
                "node {k} out of range for {n_nodes} nodes"
            )))
        }
    };
    let half_hessian = |k: usize| -> Result<DMatrix<f64>, TheoryError> {
        let h = hessians.ok_or(TheoryError::MissingHessian)?;
        let hk = h.get(k).ok_or(TheoryError::MissingHessian)?;
        if hk.shape() != (dim, dim) {
            return Err(TheoryError::SizeMismatch(format!(
                "Hessian {k} is {}x{}, expected {dim}x{dim}",
                hk.nrows(),
                hk.ncols()
            )));
        }
        Ok(0.5 * hk)
    };
    match selector {
        Weighting::NodeRisk(k) => {
            let k = node_check(k)?;
            t.view_mut((k * dim, k * dim), (dim, dim))
                .copy_from(&half_hessian(k)?);
        }
        Weighting::NetworkRisk => {
            let scale = 1.0 / n_nodes as f64;
            for k in 0..n_nodes {
                t.view_mut((k * dim, k * dim), (dim, dim))
                    .copy_from(&(half_hessian(k)? * scale));
            }
        }
        Weighting::NodeMse(k) => {
            let k = node_check(k)?;
            t.view_mut((k * dim, k * dim), (dim, dim))
                .fill_with_identity();
        }
        Weighting::NetworkMse => t.fill_diagonal(1.0 / n_nodes as f64),
    }
    Ok(t)
}

/// Inputs of the steady-state predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateInputs {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `∇²J_ℓ(w°)` for every node.
    pub hessians: Vec<DMatrix<f64>>,
    /// Covariance of the stacked, `C`-combined gradient noise at `w°`.
    pub r_v: DMatrix<f64>,
    pub mu: f64,
    /// Weighting matrix `T`.
    pub weighting: DMatrix<f64>,
}

/// How the predictor was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Method {
    /// Linear solve with `I - Bᵀ⊗Bᵀ`.
    Dense,
    /// Series `Σ_j Tr(T Bʲ Y Bʲᵀ)` summed over `terms` powers.
    Series { terms: u64 },
}

/// Steady-state prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyState {
    pub value: f64,
    pub spectral_radius: f64,
    pub method: Method,
}

/// `A ⊗ I_M`.
pub fn network_matrix(a: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    kron(a, &DMatrix::identity(dim, dim))
}

struct Prepared {
    b: DMatrix<f64>,
    /// `μ² 𝒜₂ᵀ ℛ_v 𝒜₂`.
    y: DMatrix<f64>,
    t: DMatrix<f64>,
    radius: f64,
}

fn prepare(inputs: &SteadyStateInputs) -> Result<Prepared, TheoryError> {
    let n = inputs.a1.nrows();
    let Some(m) = inputs.hessians.first().map(|h| h.nrows()) else {
        return Err(TheoryError::MissingHessian);
    };
    let nm = n * m;
    let sq = |x: &DMatrix<f64>, size: usize| x.nrows() == size && x.ncols() == size;
    if !(sq(&inputs.a1, n) && sq(&inputs.a2, n) && sq(&inputs.c, n)) {
        return Err(TheoryError::SizeMismatch("combination matrices differ in size".into()));
    }
    if inputs.hessians.len() != n || inputs.hessians.iter().any(|h| !sq(h, m)) {
        return Err(TheoryError::SizeMismatch(format!(
            "expected {n} Hessians of size {m}x{m}"
        )));
    }
    if !sq(&inputs.r_v, nm) || !sq(&inputs.weighting, nm) {
        return Err(TheoryError::SizeMismatch(format!(
            "R_v and T must be {nm}x{nm}"
        )));
    }
    let mut d = DMatrix::zeros(nm, nm);
    for k in 0..n {
        let mut block = DMatrix::zeros(m, m);
        for l in 0..n {
            let c = inputs.c[(l, k)];
            if c != 0.0 {
                block += &inputs.hessians[l] * c;
            }
        }
        d.view_mut((k * m, k * m), (m, m)).copy_from(&block);
    }
    let a1 = network_matrix(&inputs.a1, m);
    let a2 = network_matrix(&inputs.a2, m);
    let inner = DMatrix::identity(nm, nm) - d * inputs.mu;
    let b = a2.transpose() * inner * a1.transpose();
    let radius = spectral_radius(&b);
    if !(radius < 1.0) {
        return Err(TheoryError::UnstableB { radius });
    }
    let r_v = (&inputs.r_v + inputs.r_v.transpose()) * 0.5;
    let y = a2.transpose() * r_v * &a2 * (inputs.mu * inputs.mu);
    Ok(Prepared {
        b,
        y,
        t: inputs.weighting.clone(),
        radius,
    })
}

/// Steady-state weighted error `μ² vec(𝒜₂ᵀℛ_v𝒜₂)ᵀ (I - F)⁻¹ vec(T)` with
/// `F = Bᵀ ⊗ Bᵀ` and `B = 𝒜₂ᵀ(I - μ𝒟)𝒜₁ᵀ`.
///
/// Networks with `N·M ≤ 60` use a dense solve; larger ones sum the equivalent
/// series by repeated squaring.
pub fn steady_state_er(inputs: &SteadyStateInputs) -> Result<SteadyState, TheoryError> {
    let p = prepare(inputs)?;
    if p.b.nrows() <= DENSE_LIMIT {
        dense(&p)
    } else {
        Ok(series(&p, None))
    }
}

fn dense(p: &Prepared) -> Result<SteadyState, TheoryError> {
    let bt = p.b.transpose();
    let f = kron(&bt, &bt);
    let size = f.nrows();
    let lhs = DMatrix::identity(size, size) - f;
    let x = lhs
        .lu()
        .solve(&vec(&p.t))
        .ok_or(TheoryError::UnstableB { radius: p.radius })?;
    Ok(SteadyState {
        value: vec(&p.y).dot(&x),
        spectral_radius: p.radius,
        method: Method::Dense,
    })
}

/// Sums `Σ_{j < 2^K} Tr(T Bʲ Y Bʲᵀ)` by doubling, stopping when the newest
/// half contributes below rounding or after `max_doublings`.
fn series(p: &Prepared, max_doublings: Option<u32>) -> SteadyState {
    let mut s = p.y.clone();
    let mut pw = p.b.clone();
    let mut terms: u64 = 1;
    let cap = max_doublings.unwrap_or(62);
    for _ in 0..cap {
        let add = &pw * &s * pw.transpose();
        let inc = (&p.t * &add).trace();
        s += add;
        terms *= 2;
        let total = (&p.t * &s).trace();
        if inc.abs() <= 1e-16 * total.abs() && pw.amax() < 1e-8 {
            break;
        }
        pw = &pw * &pw;
        if pw.amax() == 0.0 {
            break;
        }
    }
    SteadyState {
        value: (&p.t * &s).trace(),
        spectral_radius: p.radius,
        method: Method::Series { terms },
    }
}

/// Series evaluation truncated to the first `2^doublings` powers, regardless
/// of network size.
pub fn steady_state_series(
    inputs: &SteadyStateInputs,
    doublings: u32,
) -> Result<SteadyState, TheoryError> {
    let p = prepare(inputs)?;
    Ok(series(&p, Some(doublings)))
}

/// Network excess risk of the three cooperation modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderingReport {
    pub atc: f64,
    pub cta: f64,
    pub noncooperative: f64,
    /// `atc ≤ cta ≤ noncooperative` within `1e-12`.
    pub holds: bool,
}

/// Evaluates the steady-state network excess risk of ATC, CTA and the
/// non-cooperative mode with `C = I`, for a doubly stochastic `a` and a
/// common Hessian at every node.
pub fn ordering_check(
    a: &DMatrix<f64>,
    hessians: &[DMatrix<f64>],
    r_v: &DMatrix<f64>,
    mu: f64,
) -> Result<OrderingReport, TheoryError> {
    if !check_doubly_stochastic(a) {
        return Err(TheoryError::AssumptionViolation(
            "combination matrix is not doubly stochastic".into(),
        ));
    }
    let first = hessians.first().ok_or(TheoryError::MissingHessian)?;
    if hessians.iter().any(|h| h.shape() != first.shape() || (h - first).amax() > 1e-8) {
        return Err(TheoryError::AssumptionViolation(
            "Hessians differ across nodes".into(),
        ));
    }
    let n = a.nrows();
    let m = first.nrows();
    let t = table1_weighting(Weighting::NetworkRisk, Some(hessians), n, m)?;
    let eval = |variant| -> Result<f64, TheoryError> {
        let set = preset_matrices(variant, a)
            .map_err(|e| TheoryError::AssumptionViolation(e.to_string()))?;
        let inputs = SteadyStateInputs {
            a1: set.a1,
            a2: set.a2,
            c: set.c,
            hessians: hessians.to_vec(),
            r_v: r_v.clone(),
            mu,
            weighting: t.clone(),
        };
        Ok(steady_state_er(&inputs)?.value)
    };
    let atc = eval(DiffusionVariant::Atc)?;
    let cta = eval(DiffusionVariant::Cta)?;
    let noncooperative = eval(DiffusionVariant::NonCooperative)?;
    Ok(OrderingReport {
        atc,
        cta,
        noncooperative,
        holds: atc <= cta + 1e-12 && cta <= noncooperative + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{metropolis_weights, Network};
    use proptest::prelude::*;

    fn one_d(mu: f64, d: f64, r: f64, t: f64) -> SteadyStateInputs {
        let one = DMatrix::from_element(1, 1, 1.0);
        SteadyStateInputs {
            a1: one.clone(),
            a2: one.clone(),
            c: one,
            hessians: vec![DMatrix::from_element(1, 1, d)],
            r_v: DMatrix::from_element(1, 1, r),
            mu,
            weighting: DMatrix::from_element(1, 1, t),
        }
    }

    #[test]
    fn scalar_closed_form() {
        let (mu, d, r, t): (f64, f64, f64, f64) = (0.05, 1.7, 2.3, 0.85);
        let closed = mu * mu * r * t / (1.0 - (1.0 - mu * d).powi(2));
        let got = steady_state_er(&one_d(mu, d, r, t)).unwrap();
        assert!((got.value - closed).abs() < 1e-10);
        assert_eq!(got.method, Method::Dense);
    }

    #[test]
    fn zero_noise_gives_zero() {
        assert_eq!(steady_state_er(&one_d(0.1, 1.0, 0.0, 1.0)).unwrap().value, 0.0);
    }

    #[test]
    fn unstable_b_is_refused() {
        let err = steady_state_er(&one_d(2.5, 1.0, 1.0, 1.0)).unwrap_err();
        assert!(matches!(err, TheoryError::UnstableB { radius } if (radius - 1.5).abs() < 1e-12));
    }

    #[test]
    fn weighting_examples() {
        let t = table1_weighting(Weighting::NetworkMse, None, 3, 2).unwrap();
        assert_eq!(t, DMatrix::identity(6, 6) / 3.0);
        let h = vec![DMatrix::identity(2, 2) * 2.0; 3];
        let t = table1_weighting(Weighting::NodeRisk(1), Some(&h), 3, 2).unwrap();
        let mut e = DMatrix::zeros(6, 6);
        e.view_mut((2, 2), (2, 2)).fill_with_identity();
        assert_eq!(t, e);
        assert_eq!(
            table1_weighting(Weighting::NetworkRisk, None, 3, 2),
            Err(TheoryError::MissingHessian)
        );
        assert_eq!(
            Weighting::parse("node-er", None),
            Err(TheoryError::MissingNodeIndex)
        );
        assert_eq!("node-mse:2".parse::<Weighting>().unwrap(), Weighting::NodeMse(2));
    }

    #[test]
    fn network_risk_is_average_of_node_risks() {
        let h: Vec<DMatrix<f64>> = (0..4)
            .map(|k| DMatrix::from_row_slice(2, 2, &[2.0 + k as f64, 0.5, 0.5, 1.0]))
            .collect();
        let net = table1_weighting(Weighting::NetworkRisk, Some(&h), 4, 2).unwrap();
        let mut avg = DMatrix::zeros(8, 8);
        for k in 0..4 {
            avg += table1_weighting(Weighting::NodeRisk(k), Some(&h), 4, 2).unwrap() / 4.0;
        }
        assert!((net - avg).amax() < 1e-15);
    }

    #[test]
    fn identity_combination_makes_modes_coincide() {
        let h = vec![DMatrix::identity(2, 2) * 2.0; 3];
        let r_v = DMatrix::identity(6, 6);
        let rep = ordering_check(&DMatrix::identity(3, 3), &h, &r_v, 0.1).unwrap();
        assert_eq!(rep.atc, rep.cta);
        assert_eq!(rep.cta, rep.noncooperative);
        assert!(rep.holds);
    }

    #[test]
    fn three_node_ordering_is_strict() {
        let a = metropolis_weights(&Network::complete(3).unwrap()).unwrap();
        let h = vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]); 3];
        let r_v = kron(&DMatrix::identity(3, 3), &DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 5.0]));
        let rep = ordering_check(&a, &h, &r_v, 0.05).unwrap();
        assert!(rep.atc < rep.cta && rep.cta < rep.noncooperative, "{rep:?}");
    }

    #[test]
    fn atc_cta_gap_shrinks_with_mu() {
        let a = metropolis_weights(&Network::ring(5).unwrap()).unwrap();
        let h = vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 3.0]); 5];
        let r_v = kron(&DMatrix::identity(5, 5), &DMatrix::identity(2, 2));
        let gap = |mu: f64| {
            let r = ordering_check(&a, &h, &r_v, mu).unwrap();
            (r.cta - r.atc) / r.atc
        };
        let (g1, g2, g3) = (gap(0.1), gap(0.05), gap(0.025));
        assert!(g1 > g2 && g2 > g3 && g3 > 0.0);
    }

    #[test]
    fn ordering_rejects_non_compliant_inputs() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        let h = vec![DMatrix::identity(1, 1); 2];
        assert!(matches!(
            ordering_check(&a, &h, &DMatrix::identity(2, 2), 0.1),
            Err(TheoryError::AssumptionViolation(_))
        ));
        let a = DMatrix::from_element(2, 2, 0.5);
        let h = vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1) * 2.0];
        assert!(matches!(
            ordering_check(&a, &h, &DMatrix::identity(2, 2), 0.1),
            Err(TheoryError::AssumptionViolation(_))
        ));
    }

    fn spd(m: usize, v: Vec<f64>, shift: f64) -> DMatrix<f64> {
        let g = DMatrix::from_vec(m, m, v);
        &g * g.transpose() + DMatrix::identity(m, m) * shift
    }

    fn instance() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
        (2usize..7, 1usize..4, any::<u64>()).prop_flat_map(|(n, m, seed)| {
            (
                Just(Network::random_geometric(n, 0.7, seed).unwrap()),
                prop::collection::vec(-1.0f64..1.0, m * m),
                prop::collection::vec(-1.0f64..1.0, m * m),
                0.05f64..0.9,
            )
                .prop_map(move |(net, hv, rv, frac)| {
                    let a = metropolis_weights(&net).unwrap();
                    let h = spd(m, hv, 0.5);
                    let r = spd(m, rv, 0.0);
                    let lmax = h.symmetric_eigenvalues().max();
                    (a, h, r, frac / lmax)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ordering_holds_on_compliant_instances((a, h, r, mu) in instance()) {
            let n = a.nrows();
            let hs = vec![h; n];
            let r_v = kron(&DMatrix::identity(n, n), &r);
            let rep = ordering_check(&a, &hs, &r_v, mu).unwrap();
            prop_assert!(rep.holds, "{rep:?}");
        }

        #[test]
        fn series_matches_dense_solve((a, h, r, mu) in instance()) {
            let n = a.nrows();
            let m = h.nrows();
            let hs = vec![h; n];
            let set = preset_matrices(DiffusionVariant::Atc, &a).unwrap();
            let inputs = SteadyStateInputs {
                a1: set.a1,
                a2: set.a2,
                c: set.c,
                weighting: table1_weighting(Weighting::NetworkRisk, Some(&hs), n, m).unwrap(),
                hessians: hs,
                r_v: kron(&DMatrix::identity(n, n), &r),
                mu,
            };
            let d = steady_state_er(&inputs).unwrap();
            // The tail after J terms is bounded by ρ(B)^(2J) / (1 - ρ(B)²) relative.
            let rho = d.spectral_radius;
            let doublings = 10u32;
            let j = 1u64 << doublings;
            let s = steady_state_series(&inputs, doublings).unwrap();
            let tail = rho.powf(2.0 * j as f64) / (1.0 - rho * rho);
            prop_assert!((d.value - s.value).abs() <= (tail + 1e-9) * d.value.abs() + 1e-14,
                "dense {} series {} rho {}", d.value, s.value, rho);
        }
    }
}
