//! Communication graphs, lazy-Metropolis weights and the synchronous
//! averaging round.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected graph on `0..n`; self-loops are implicit and never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl CommGraph {
    pub fn from_edges(n: usize, edges: &[[usize; 2]]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for &[a, b] in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidParameter(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Self { n, edges: set })
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| [i, j])).collect();
        Self::from_edges(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n).map(|i| [i, (i + 1) % n]).collect();
        Self::from_edges(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| [i - 1, i]).collect();
        Self::from_edges(n, &edges)
    }

    pub fn star(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| [0, i]).collect();
        Self::from_edges(n, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let mut adjacency = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Config form: `{"preset": "ring", "n": 5}` or `{"edges": [[0, 1], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum GraphSpec {
    Preset { preset: GraphPreset, n: usize },
    Edges {
        edges: Vec<[usize; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPreset {
    Complete,
    Ring,
    Path,
    Star,
}

impl GraphSpec {
    pub fn build(&self) -> Result<CommGraph> {
        match self {
            GraphSpec::Preset { preset, n } => match preset {
                GraphPreset::Complete => CommGraph::complete(*n),
                GraphPreset::Ring => CommGraph::ring(*n),
                GraphPreset::Path => CommGraph::path(*n),
                GraphPreset::Star => CommGraph::star(*n),
            },
            GraphSpec::Edges { edges, n } => {
                let inferred = edges.iter().flat_map(|e| e.iter()).max().map_or(1, |m| m + 1);
                CommGraph::from_edges(n.unwrap_or(inferred), edges)
            }
        }
    }
}

/// Doubly stochastic consensus weights with the cached `σ₂(W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
    sigma2: f64,
}

impl WeightMatrix {
    /// Wraps an arbitrary matrix after checking double stochasticity.
    pub fn new(n: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n * n {
            return Err(Error::DimensionMismatch(format!("weight matrix needs {} entries", n * n)));
        }
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidParameter("weight matrix has a negative entry".into()));
        }
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w[i * n + j]).sum();
            let col: f64 = (0..n).map(|j| w[j * n + i]).sum();
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!("row/column {i} does not sum to one")));
            }
        }
        let sigma2 = second_singular_value(n, &w)?;
        Ok(Self { n, w, sigma2 })
    }

    /// `W = (1/N) 𝟙𝟙ᵀ`.
    pub fn averaging(n: usize) -> Self {
        Self { n, w: vec![1.0 / n as f64; n * n], sigma2: 0.0 }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.sigma2
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.16e}", self.get(i, j))).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// `Σⱼ W_ij θⱼ` for a single agent `i`.
    pub fn mix_row(&self, i: usize, thetas: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; thetas[0].len()];
        for (j, theta) in thetas.iter().enumerate() {
            let w = self.get(i, j);
            if w != 0.0 {
                out.iter_mut().zip(theta).for_each(|(o, t)| *o += w * t);
            }
        }
        out
    }
}

/// `W = ½I + ½M` with Metropolis weights `M_ij = 1/(1 + max(deg_i, deg_j))`.
pub fn lazy_metropolis(graph: &CommGraph) -> Result<WeightMatrix> {
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    let n = graph.n_nodes();
    let deg = graph.degrees();
    let mut m = vec![0.0; n * n];
    for (a, b) in graph.edges() {
        let w = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        m[a * n + b] = w;
        m[b * n + a] = w;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[i * n + j]).sum();
        m[i * n + i] = 1.0 - off;
    }
    let mut w: Vec<f64> = m.iter().map(|x| 0.5 * x).collect();
    for i in 0..n {
        w[i * n + i] += 0.5;
    }
    WeightMatrix::new(n, w)
}

/// Second largest singular value of a doubly stochastic matrix. Full SVD up
/// to 64 nodes, power iteration on `W − (1/N)𝟙𝟙ᵀ` above. Defined as 0 for a
/// single node.
pub fn second_singular_value(n: usize, w: &[f64]) -> Result<f64> {
    if n == 1 {
        return Ok(0.0);
    }
    let sigma2 = if n <= 64 {
        let m = DMatrix::from_row_slice(n, n, w);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv[1]
    } else {
        let inv = 1.0 / n as f64;
        let mut d = DMatrix::from_row_slice(n, n, w);
        d.iter_mut().for_each(|x| *x -= inv);
        let gram = d.transpose() * &d;
        let mut x = nalgebra::DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
        let mut lambda = 0.0;
        for _ in 0..100_000 {
            let y = &gram * &x;
            let norm = y.norm();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            let next = norm / x.norm();
            x = y / norm;
            if (next - lambda).abs() <= 1e-10 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda.sqrt()
    };
    if sigma2 >= 1.0 - 1e-12 {
        return Err(Error::EffectivelyDisconnected(sigma2));
    }
    Ok(sigma2.max(0.0))
}

/// One synchronous round: every agent replaces its vector by `Σⱼ W_ij θⱼ`.
pub fn consensus_step(thetas: &[Vec<f64>], w: &WeightMatrix) -> Result<Vec<Vec<f64>>> {
    if thetas.len() != w.n() {
        return Err(Error::DimensionMismatch(format!("{} agents, {}x{} weights", thetas.len(), w.n(), w.n())));
    }
    let d = thetas.first().map_or(0, Vec::len);
    if thetas.iter().any(|t| t.len() != d) {
        return Err(Error::DimensionMismatch("agent vectors differ in length".into()));
    }
    Ok((0..w.n()).map(|i| w.mix_row(i, thetas)).collect())
}

/// Network mean of the agents' vectors.
pub fn mean_vector(thetas: &[Vec<f64>]) -> Vec<f64> {
    let n = thetas.len() as f64;
    let mut mean = vec![0.0; thetas[0].len()];
    for t in thetas {
        mean.iter_mut().zip(t).for_each(|(m, x)| *m += x / n);
    }
    mean
}

/// `maxᵢ ‖θ̄ − θᵢ‖₂`.
pub fn consensus_error(thetas: &[Vec<f64>]) -> f64 {
    let mean = mean_vector(thetas);
    thetas
        .iter()
        .map(|t| t.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
