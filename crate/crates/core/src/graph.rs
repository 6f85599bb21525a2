//! Undirected weighted communication topology and the consensus mixing parameter.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::linalg::symmetric_eigenvalues;
use crate::{Error, Result};

/// Margin below 1 that the mixing factor must clear for a kappa to be accepted.
pub const SPECTRAL_TOL: f64 = 1e-9;

/// An undirected edge between two distinct agents (zero-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Immutable communication graph.
#[derive(Debug, Clone)]
pub struct Graph {
    agents: usize,
    edges: Vec<Edge>,
    adjacency: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds the graph from zero-based `(i, j, weight)` triples.
    pub fn new(agents: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidParameter {
                name: "agent_count",
                reason: "must be at least 1",
            });
        }
        let mut adjacency = DMatrix::zeros(agents, agents);
        let mut list = Vec::with_capacity(edges.len());
        for &(a, b, weight) in edges {
            for idx in [a, b] {
                if idx >= agents {
                    return Err(Error::IndexOutOfRange {
                        index: idx,
                        len: agents,
                    });
                }
            }
            if a == b {
                return Err(Error::SelfLoop { agent: a });
            }
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(Error::NonPositiveWeight { weight });
            }
            if adjacency[(a, b)] != 0.0 {
                return Err(Error::DuplicateEdge { a, b });
            }
            adjacency[(a, b)] = weight;
            adjacency[(b, a)] = weight;
            list.push(Edge { a, b, weight });
        }
        let neighbors = (0..agents)
            .map(|i| (0..agents).filter(|&j| adjacency[(i, j)] > 0.0).collect())
            .collect();
        Ok(Graph {
            agents,
            edges: list,
            adjacency,
            neighbors,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.row_iter().map(|r| r.sum()).collect()
    }

    /// `L = D − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency.clone();
        for (i, d) in self.degrees().into_iter().enumerate() {
            l[(i, i)] = d;
        }
        l
    }

    /// Neighbors of agent `i` in ascending order.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index: i,
                len: self.agents,
            })
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        i < self.agents && j < self.agents && self.adjacency[(i, j)] > 0.0
    }

    /// Laplacian spectrum, ascending. The first entry is zero up to rounding.
    pub fn laplacian_eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.laplacian())
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.agents];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// The round map `G = I − L/κ` applied by one consensus step.
    pub fn mixing_matrix(&self, kappa: f64) -> DMatrix<f64> {
        DMatrix::identity(self.agents, self.agents) - self.laplacian() / kappa
    }
}

/// A kappa accepted by [`validate_kappa`] together with its contraction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConfig {
    pub kappa: f64,
    pub rho: f64,
}

/// Spectral radius of `I − L/κ − (1/N)11ᵀ`.
///
/// The all-ones direction is an eigenvector of `L` with eigenvalue 0 and is removed
/// by the averaging projector, so only the remaining `N − 1` Laplacian eigenvalues
/// contribute `|1 − λ/κ|`.
pub fn mixing_factor(g: &Graph, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::NonPositiveKappa { kappa });
    }
    Ok(g.laplacian_eigenvalues()
        .into_iter()
        .skip(1)
        .map(|lambda| (1.0 - lambda / kappa).abs())
        .fold(0.0, f64::max))
}

pub fn validate_kappa(g: &Graph, kappa: f64) -> Result<MixingConfig> {
    if !g.is_connected() {
        return Err(Error::GraphDisconnected);
    }
    let rho = mixing_factor(g, kappa)?;
    if rho < 1.0 - SPECTRAL_TOL {
        Ok(MixingConfig { kappa, rho })
    } else {
        Err(Error::KappaTooSmall { rho })
    }
}
