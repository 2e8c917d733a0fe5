//! Network graphs and the combination matrices that govern how estimates and
//! gradients flow between neighbors.
//!
//! Matrices follow the column convention: entry `(l, k)` is the weight node `k`
//! assigns to information arriving from node `l`. Combination matrices `a1` and
//! `a2` are left-stochastic (columns sum to one) and `c` is right-stochastic
//! (rows sum to one).

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Absolute slack used by every stochasticity check.
pub const STOCHASTIC_TOL: f64 = 1e-10;

/// Failures while building graphs or combination matrices.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TopologyError {
    #[error("graph is disconnected: node {unreachable} cannot be reached from node 0")]
    DisconnectedGraph { unreachable: usize },
    #[error("adjacency is not symmetric at ({row}, {col})")]
    AsymmetricAdjacency { row: usize, col: usize },
    #[error("node {node} is missing its self-loop")]
    MissingSelfLoop { node: usize },
    #[error("adjacency must be square and nonempty, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("node {node} has no neighbor besides itself")]
    DegenerateNeighborhood { node: usize },
    #[error("matrix {matrix} violates stochasticity along {axis} {index}: sum = {sum}")]
    StochasticityViolation {
        matrix: &'static str,
        axis: Axis,
        index: usize,
        sum: f64,
    },
    #[error("matrix {matrix} has a negative entry at ({row}, {col})")]
    NegativeEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
    },
    #[error("matrix {matrix} puts weight on non-neighbor pair ({row}, {col})")]
    OutsideNeighborhood {
        matrix: &'static str,
        row: usize,
        col: usize,
    },
    #[error("matrix {matrix} has size {got}, network has {expected} nodes")]
    SizeMismatch {
        matrix: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("edge list line {line}: {message}")]
    EdgeList { line: usize, message: String },
    #[error("unknown topology `{0}`; expected ring:N, complete:N, random-geometric:N:radius:seed or an edge-list path")]
    UnknownTopology(String),
    #[error("random-geometric graph stayed disconnected after {attempts} draws")]
    GenerationFailed { attempts: usize },
    #[error("reading edge list: {0}")]
    Io(String),
}

/// Which sums a stochasticity check looked at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Row => f.write_str("row"),
            Axis::Column => f.write_str("column"),
        }
    }
}

/// An undirected connected graph in which every node is its own neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    adjacency: Vec<bool>,
    n: usize,
}

/// Builds a network from a dense adjacency relation, checking symmetry,
/// self-loops and connectivity.
pub fn build_network(adjacency: &[Vec<bool>]) -> Result<Network, TopologyError> {
    let n = adjacency.len();
    if n == 0 {
        return Err(TopologyError::BadShape { rows: 0, cols: 0 });
    }
    let mut flat = Vec::with_capacity(n * n);
    for row in adjacency {
        if row.len() != n {
            return Err(TopologyError::BadShape {
                rows: n,
                cols: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Network::from_flat(n, flat)
}

impl Network {
    fn from_flat(n: usize, adjacency: Vec<bool>) -> Result<Self, TopologyError> {
        for k in 0..n {
            if !adjacency[k * n + k] {
                return Err(TopologyError::MissingSelfLoop { node: k });
            }
            for l in 0..k {
                if adjacency[k * n + l] != adjacency[l * n + k] {
                    return Err(TopologyError::AsymmetricAdjacency { row: k, col: l });
                }
            }
        }
        let net = Network { adjacency, n };
        if let Some(node) = net.first_unreachable() {
            return Err(TopologyError::DisconnectedGraph { unreachable: node });
        }
        Ok(net)
    }

    /// Builds a network from undirected edges; self-loops are added.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::BadShape { rows: 0, cols: 0 });
        }
        let mut adj = vec![false; n * n];
        for k in 0..n {
            adj[k * n + k] = true;
        }
        for (idx, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(TopologyError::EdgeList {
                    line: idx + 1,
                    message: format!("node index out of range for {n} nodes"),
                });
            }
            adj[u * n + v] = true;
            adj[v * n + u] = true;
        }
        Self::from_flat(n, adj)
    }

    /// Ring in which node `k` links to `k-1` and `k+1`.
    pub fn ring(n: usize) -> Result<Self, TopologyError> {
        let edges: Vec<_> = if n > 1 {
            (0..n).map(|k| (k, (k + 1) % n)).collect()
        } else {
            Vec::new()
        };
        Self::from_edges(n, &edges)
    }

    /// Every pair of nodes linked.
    pub fn complete(n: usize) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::BadShape { rows: 0, cols: 0 });
        }
        Self::from_flat(n, vec![true; n * n])
    }

    /// Nodes placed uniformly in the unit square, linked when closer than
    /// `radius`. Placements are redrawn from the same seeded stream until the
    /// graph is connected, so a given seed always yields the same graph.
    pub fn random_geometric(n: usize, radius: f64, seed: u64) -> Result<Self, TopologyError> {
        const MAX_ATTEMPTS: usize = 10_000;
        if n == 0 {
            return Err(TopologyError::BadShape { rows: 0, cols: 0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_ATTEMPTS {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let mut edges = Vec::new();
            for k in 0..n {
                for l in 0..k {
                    let (dx, dy) = (pts[k].0 - pts[l].0, pts[k].1 - pts[l].1);
                    if dx * dx + dy * dy <= radius * radius {
                        edges.push((l, k));
                    }
                }
            }
            match Self::from_edges(n, &edges) {
                Ok(net) => return Ok(net),
                Err(TopologyError::DisconnectedGraph { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(TopologyError::GenerationFailed {
            attempts: MAX_ATTEMPTS,
        })
    }

    /// Number of nodes N.
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Whether `l` belongs to the neighborhood of `k` (symmetric).
    pub fn is_neighbor(&self, l: usize, k: usize) -> bool {
        self.adjacency[l * self.n + k]
    }

    /// Neighborhood of `k`, including `k` itself, in increasing order.
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&l| self.is_neighbor(l, k))
    }

    /// Neighborhood size |N_k|, counting the node itself.
    pub fn degree(&self, k: usize) -> usize {
        self.neighbors(k).count()
    }

    /// Undirected edges `(l, k)` with `l < k`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.n {
            for l in 0..k {
                if self.is_neighbor(l, k) {
                    out.push((l, k));
                }
            }
        }
        out
    }

    fn first_unreachable(&self) -> Option<usize> {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for l in 0..self.n {
                if !seen[l] && self.is_neighbor(l, k) {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        seen.iter().position(|s| !s)
    }
}

/// Metropolis combination matrix:
/// `a[l][k] = min(1/(|N_l|-1), 1/(|N_k|-1))` for distinct neighbors, with the
/// diagonal taking the residual so that every column sums to one.
pub fn metropolis_weights(net: &Network) -> Result<DMatrix<f64>, TopologyError> {
    let n = net.n_nodes();
    if n == 1 {
        return Ok(DMatrix::identity(1, 1));
    }
    let deg: Vec<usize> = (0..n).map(|k| net.degree(k)).collect();
    if let Some(node) = deg.iter().position(|&d| d < 2) {
        return Err(TopologyError::DegenerateNeighborhood { node });
    }
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut off = 0.0;
        for l in net.neighbors(k).filter(|&l| l != k) {
            let w = (1.0 / (deg[l] - 1) as f64).min(1.0 / (deg[k] - 1) as f64);
            a[(l, k)] = w;
            off += w;
        }
        // Exact arithmetic gives a nonnegative residual; clamp rounding noise.
        a[(k, k)] = (1.0 - off).max(0.0);
    }
    Ok(a)
}

/// The learner variants that are expressible through combination matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionVariant {
    Atc,
    Cta,
    NonCooperative,
}

/// The triple `(a1, a2, c)` of combination matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationSet {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl CombinationSet {
    /// Validates and wraps explicitly supplied matrices.
    pub fn general(
        a1: DMatrix<f64>,
        a2: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self, TopologyError> {
        let set = CombinationSet { a1, a2, c };
        set.validate()?;
        Ok(set)
    }

    /// `A1 = A2 = C = I`: independent nodes.
    pub fn identity(n: usize) -> Self {
        let i = DMatrix::identity(n, n);
        CombinationSet {
            a1: i.clone(),
            a2: i.clone(),
            c: i,
        }
    }

    /// Number of nodes.
    pub fn n_nodes(&self) -> usize {
        self.a1.nrows()
    }

    /// Checks shapes, signs and stochasticity.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let n = self.a1.nrows();
        for (name, m) in [("a1", &self.a1), ("a2", &self.a2), ("c", &self.c)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(TopologyError::SizeMismatch {
                    matrix: name,
                    got: m.nrows().max(m.ncols()),
                    expected: n,
                });
            }
            check_nonnegative(name, m)?;
        }
        check_columns("a1", &self.a1)?;
        check_columns("a2", &self.a2)?;
        check_rows("c", &self.c)?;
        Ok(())
    }

    /// Additionally checks that no weight crosses a non-edge of `net`.
    pub fn validate_against(&self, net: &Network) -> Result<(), TopologyError> {
        self.validate()?;
        let n = net.n_nodes();
        for (name, m) in [("a1", &self.a1), ("a2", &self.a2), ("c", &self.c)] {
            if m.nrows() != n {
                return Err(TopologyError::SizeMismatch {
                    matrix: name,
                    got: m.nrows(),
                    expected: n,
                });
            }
            for k in 0..n {
                for l in 0..n {
                    if m[(l, k)] != 0.0 && !net.is_neighbor(l, k) {
                        return Err(TopologyError::OutsideNeighborhood {
                            matrix: name,
                            row: l,
                            col: k,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Maps a variant and a combination matrix `a` to `(a1, a2, c)`:
/// ATC uses `(I, A, I)`, CTA uses `(A, I, I)` and the non-cooperative mode uses
/// identities throughout (`a` is ignored).
pub fn preset_matrices(
    variant: DiffusionVariant,
    a: &DMatrix<f64>,
) -> Result<CombinationSet, TopologyError> {
    let n = a.nrows();
    let id = DMatrix::identity(n, n);
    let set = match variant {
        DiffusionVariant::Atc => CombinationSet {
            a1: id.clone(),
            a2: a.clone(),
            c: id,
        },
        DiffusionVariant::Cta => CombinationSet {
            a1: a.clone(),
            a2: id.clone(),
            c: id,
        },
        DiffusionVariant::NonCooperative => CombinationSet {
            a1: id.clone(),
            a2: id.clone(),
            c: id,
        },
    };
    set.validate()?;
    Ok(set)
}

/// True iff entries are nonnegative and every row and column sums to one
/// within [`STOCHASTIC_TOL`].
pub fn check_doubly_stochastic(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && check_nonnegative("m", m).is_ok()
        && check_rows("m", m).is_ok()
        && check_columns("m", m).is_ok()
}

fn check_nonnegative(name: &'static str, m: &DMatrix<f64>) -> Result<(), TopologyError> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !(m[(r, c)] >= 0.0) {
                return Err(TopologyError::NegativeEntry {
                    matrix: name,
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

fn check_columns(name: &'static str, m: &DMatrix<f64>) -> Result<(), TopologyError> {
    for (index, col) in m.column_iter().enumerate() {
        let sum = col.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(TopologyError::StochasticityViolation {
                matrix: name,
                axis: Axis::Column,
                index,
                sum,
            });
        }
    }
    Ok(())
}

fn check_rows(name: &'static str, m: &DMatrix<f64>) -> Result<(), TopologyError> {
    for (index, row) in m.row_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(TopologyError::StochasticityViolation {
                matrix: name,
                axis: Axis::Row,
                index,
                sum,
            });
        }
    }
    Ok(())
}

/// Parses an edge list: one `u v` pair per line, 0-indexed. Blank lines and
/// lines starting with `#` are skipped. The node count is one more than the
/// largest index unless `n_nodes` is given.
pub fn parse_edge_list(text: &str, n_nodes: Option<usize>) -> Result<Network, TopologyError> {
    let mut edges = Vec::new();
    let mut max_node = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(TopologyError::EdgeList {
                line: idx + 1,
                message: format!("expected two node indices, found {}", parts.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| TopologyError::EdgeList {
                line: idx + 1,
                message: format!("`{s}` is not a node index"),
            })
        };
        let (u, v) = (parse(parts[0])?, parse(parts[1])?);
        max_node = max_node.max(u).max(v);
        edges.push((u, v));
    }
    let n = n_nodes.unwrap_or(if edges.is_empty() { 1 } else { max_node + 1 });
    Network::from_edges(n, &edges)
}

/// Topology selector: `ring:N`, `complete:N`,
/// `random-geometric:N:radius:seed` or a path to an edge-list file.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Ring(usize),
    Complete(usize),
    RandomGeometric { n: usize, radius: f64, seed: u64 },
    EdgeList(std::path::PathBuf),
}

impl FromStr for TopologySpec {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopologyError::UnknownTopology(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["ring", n] => Ok(TopologySpec::Ring(n.parse().map_err(|_| bad())?)),
            ["complete", n] => Ok(TopologySpec::Complete(n.parse().map_err(|_| bad())?)),
            ["random-geometric", n, r, seed] => Ok(TopologySpec::RandomGeometric {
                n: n.parse().map_err(|_| bad())?,
                radius: r.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            }),
            _ if !s.is_empty() && !s.contains(':') => Ok(TopologySpec::EdgeList(s.into())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologySpec::Ring(n) => write!(f, "ring:{n}"),
            TopologySpec::Complete(n) => write!(f, "complete:{n}"),
            TopologySpec::RandomGeometric { n, radius, seed } => {
                write!(f, "random-geometric:{n}:{radius}:{seed}")
            }
            TopologySpec::EdgeList(p) => write!(f, "{}", p.display()),
        }
    }
}

impl TopologySpec {
    /// Builds the network. Edge-list paths are resolved relative to `base`.
    pub fn build(&self, base: Option<&Path>) -> Result<Network, TopologyError> {
        match self {
            TopologySpec::Ring(n) => Network::ring(*n),
            TopologySpec::Complete(n) => Network::complete(*n),
            TopologySpec::RandomGeometric { n, radius, seed } => {
                Network::random_geometric(*n, *radius, *seed)
            }
            TopologySpec::EdgeList(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| TopologyError::Io(format!("{}: {e}", path.display())))?;
                parse_edge_list(&text, None)
            }
        }
    }
}
