//! Communication graphs, Metropolis–Hastings mixing matrices and their
//! spectral constants.
//!
//! Agents are indexed from 0 internally. Edges are undirected and stored as
//! ordered pairs `(i, j)` with `i < j`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Purpose};

/// Tolerance on row and column sums of a doubly-stochastic matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Maximum number of random samples drawn while looking for a connected graph.
pub const MAX_GRAPH_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    Complete,
    Ring,
    Path,
    /// Erdős–Rényi graph with edge probability `p`, resampled until connected.
    RandomConnected { p: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from an edge list. Self-loops are rejected; duplicate and
    /// reversed pairs collapse to one undirected edge.
    pub fn from_edges(n_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_agents < 1 {
            return Err(Error::InvalidSize("graph needs at least one agent".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::ContractViolation(format!("self-loop at agent {i}")));
            }
            if i >= n_agents || j >= n_agents {
                return Err(Error::ContractViolation(format!(
                    "edge ({i}, {j}) out of range for {n_agents} agents"
                )));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self { n_agents, edges: set })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_agents];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn is_connected(&self) -> bool {
        let adj: Vec<Vec<usize>> = (0..self.n_agents).map(|i| self.neighbors(i)).collect();
        let mut seen = vec![false; self.n_agents];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_graph(topology: &Topology, n_agents: usize) -> Result<Graph> {
    if n_agents < 2 {
        return Err(Error::InvalidSize(format!(
            "need at least 2 agents, got {n_agents}"
        )));
    }
    let n = n_agents;
    match topology {
        Topology::Complete => {
            Graph::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
        }
        Topology::Ring => Graph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))),
        Topology::Path => Graph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))),
        Topology::RandomConnected { p, seed } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(crate::error::invalid("p", format!("edge probability {p} not in (0, 1]")));
            }
            let mut rng = seeded(*seed, Purpose::Graph);
            for _ in 0..MAX_GRAPH_ATTEMPTS {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < *p {
                            edges.push((i, j));
                        }
                    }
                }
                let g = Graph::from_edges(n, edges)?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
            Err(Error::Disconnected(format!(
                "no connected sample in {MAX_GRAPH_ATTEMPTS} draws (n={n}, p={p})"
            )))
        }
    }
}

/// Doubly-stochastic weights together with `alpha = ||I - W||_2` and the
/// spectral gap `kappa = 1 - max(|lambda_2|, |lambda_N|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    alpha: f64,
    kappa: f64,
}

impl MixingMatrix {
    /// Wraps and validates a user-supplied weight matrix.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        let (alpha, kappa) = spectral_params(&w)?;
        if kappa <= 0.0 {
            return Err(Error::Disconnected(format!(
                "spectral gap {kappa:e} is not positive"
            )));
        }
        Ok(Self { w, alpha, kappa })
    }

    pub fn n_agents(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Agents `j != i` with `w_ij > 0`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_agents())
            .filter(|&j| j != i && self.w[(i, j)] > 0.0)
            .collect()
    }

    /// `||W - (1/N) 11^T||_2`, which equals `1 - kappa` for symmetric W.
    pub fn consensus_norm(&self) -> f64 {
        let n = self.n_agents();
        let centered = &self.w - DMatrix::from_element(n, n, 1.0 / n as f64);
        centered.singular_values().max()
    }
}

/// `w_ij = 1 / (1 + max(d_i, d_j))` on edges, self-weights fill each row to 1.
pub fn metropolis_mixing(g: &Graph) -> Result<MixingMatrix> {
    if !g.is_connected() {
        return Err(Error::Disconnected(
            "Metropolis-Hastings weights need a connected graph".into(),
        ));
    }
    let n = g.n_agents();
    let deg = g.degrees();
    let mut w = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_matrix(w)
}

/// Returns `(alpha, kappa)` for a symmetric doubly-stochastic matrix.
pub fn spectral_params(w: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = w.nrows();
    if n == 0 || w.ncols() != n {
        return Err(Error::ContractViolation(format!(
            "mixing matrix must be square and non-empty, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    check_doubly_stochastic(w)?;
    for i in 0..n {
        for j in i + 1..n {
            if (w[(i, j)] - w[(j, i)]).abs() > STOCHASTIC_TOL {
                return Err(Error::ContractViolation(format!(
                    "mixing matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let alpha = (DMatrix::identity(n, n) - w).singular_values().max();
    let mut eig: Vec<f64> = w.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let kappa = if n == 1 {
        1.0
    } else {
        1.0 - eig[1].abs().max(eig[n - 1].abs())
    };
    Ok((alpha, kappa))
}

fn check_doubly_stochastic(w: &DMatrix<f64>) -> Result<()> {
    for v in w.iter() {
        if !(-STOCHASTIC_TOL..=1.0 + STOCHASTIC_TOL).contains(v) {
            return Err(Error::ContractViolation(format!(
                "mixing weight {v} outside [0, 1]"
            )));
        }
    }
    for i in 0..w.nrows() {
        let r: f64 = w.row(i).sum();
        let c: f64 = w.column(i).sum();
        if (r - 1.0).abs() > STOCHASTIC_TOL || (c - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::ContractViolation(format!(
                "row/column {i} sums to {r}/{c}, expected 1"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bfs_reachable(g: &Graph) -> usize {
        let mut seen = vec![false; g.n_agents()];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for u in 0..g.n_agents() {
                if g.has_edge(v, u) && !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count
    }

    #[test]
    fn complete_three() {
        let g = build_graph(&Topology::Complete, 3).unwrap();
        let want: BTreeSet<_> = [(0, 1), (0, 2), (1, 2)].into_iter().collect();
        assert_eq!(g.edges(), &want);
    }

    #[test]
    fn ring_four() {
        let g = build_graph(&Topology::Ring, 4).unwrap();
        let want: BTreeSet<_> = [(0, 1), (1, 2), (2, 3), (0, 3)].into_iter().collect();
        assert_eq!(g.edges(), &want);
    }

    #[test]
    fn random_connected_is_connected() {
        let g = build_graph(&Topology::RandomConnected { p: 0.4, seed: 7 }, 6).unwrap();
        assert_eq!(bfs_reachable(&g), 6);
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            build_graph(&Topology::Complete, 1),
            Err(Error::InvalidSize(_))
        ));
    }

    #[test]
    fn two_node_path_weights() {
        let g = build_graph(&Topology::Path, 2).unwrap();
        let m = metropolis_mixing(&g).unwrap();
        for v in m.weights().iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn complete_three_weights_are_thirds() {
        let m = metropolis_mixing(&build_graph(&Topology::Complete, 3).unwrap()).unwrap();
        for v in m.weights().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // rank-one average: eigenvalues {1, 0, 0}
        assert!((m.kappa() - 1.0).abs() < 1e-12);
        assert!((m.alpha() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ring_four_weights_and_sums() {
        let m = metropolis_mixing(&build_graph(&Topology::Ring, 4).unwrap()).unwrap();
        let w = m.weights();
        for i in 0..4 {
            assert!((w[(i, i)] - 1.0 / 3.0).abs() < 1e-15);
            assert!((w[(i, (i + 1) % 4)] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(w[(i, (i + 2) % 4)], 0.0);
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..4 {
                row += w[(i, j)];
                col += w[(j, i)];
            }
            assert!((row - 1.0).abs() <= 1e-12 && (col - 1.0).abs() <= 1e-12);
        }
    }

    /// Power iteration on W - J/N, restricted to the mean-zero subspace.
    fn power_iteration_gap(w: &DMatrix<f64>) -> f64 {
        let n = w.nrows();
        let b = w - DMatrix::from_element(n, n, 1.0 / n as f64);
        let m = &b * &b;
        let mut v = nalgebra::DVector::from_fn(n, |i, _| (i as f64 + 1.0).sin());
        let mean = v.mean();
        v.add_scalar_mut(-mean);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let next = &m * &v;
            lambda = next.norm() / v.norm();
            v = next.normalize();
        }
        1.0 - lambda.sqrt()
    }

    #[test]
    fn ring_four_kappa_matches_power_iteration() {
        let m = metropolis_mixing(&build_graph(&Topology::Ring, 4).unwrap()).unwrap();
        let oracle = power_iteration_gap(m.weights());
        assert!((m.kappa() - oracle).abs() < 1e-8, "{} vs {oracle}", m.kappa());
    }

    #[test]
    fn identity_has_zero_gap_and_is_rejected() {
        let w = DMatrix::<f64>::identity(3, 3);
        let (_, kappa) = spectral_params(&w).unwrap();
        assert_eq!(kappa, 0.0);
        assert!(matches!(
            MixingMatrix::from_matrix(w),
            Err(Error::Disconnected(_))
        ));
    }

    #[test]
    fn non_stochastic_rejected() {
        let w = DMatrix::from_row_slice(2, 2, &[0.6, 0.6, 0.4, 0.4]);
        assert!(matches!(spectral_params(&w), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert!(matches!(metropolis_mixing(&g), Err(Error::Disconnected(_))));
    }

    #[test]
    fn deterministic() {
        let g = build_graph(&Topology::RandomConnected { p: 0.5, seed: 3 }, 8).unwrap();
        let a = metropolis_mixing(&g).unwrap();
        let b = metropolis_mixing(&g).unwrap();
        let abits: Vec<u64> = a.weights().iter().map(|v| v.to_bits()).collect();
        let bbits: Vec<u64> = b.weights().iter().map(|v| v.to_bits()).collect();
        assert_eq!(abits, bbits);
    }
}
