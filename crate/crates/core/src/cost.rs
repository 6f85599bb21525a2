//! The global quadratic performance index and each agent's private slice of it.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{GridField, TimeGrid};
use crate::graph::Graph;
use crate::linalg::{is_symmetric, symmetric_eigenvalues};
use crate::{Error, Result};

/// Slack on the smallest eigenvalue of `Q` before it is rejected as indefinite.
pub const PSD_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

/// `J = ½∫ xᵀQx + uᵀRu dt` together with the per-agent slices
/// `Q̃ᵢ = diag{0,…,N·I,…,0}·Q` and `R̃ᵢ = diag{0,…,N·I,…,0}·R`.
///
/// The slices are stored exactly as defined (row block times `N`); they are not
/// symmetric, only their average is.
#[derive(Debug, Clone)]
pub struct CostSpec {
    agents: usize,
    state_dim: usize,
    control_dim: usize,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    r_inverse: DMatrix<f64>,
    q_slices: Vec<DMatrix<f64>>,
    r_slices: Vec<DMatrix<f64>>,
    r_block_inverses: Option<Vec<DMatrix<f64>>>,
}

fn row_slice(m: &DMatrix<f64>, i: usize, block: usize, agents: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    out.rows_mut(i * block, block)
        .copy_from(&(m.rows(i * block, block) * agents as f64));
    out
}

fn block_is_zero(m: &DMatrix<f64>, i: usize, j: usize, rows: usize) -> bool {
    m.view((i * rows, j * rows), (rows, rows))
        .iter()
        .all(|v| *v == 0.0)
}

impl CostSpec {
    /// Validates `Q ⪰ 0`, `R ≻ 0` and, when `graph` is given, that every nonzero
    /// off-diagonal block of `Q` or `R` sits on an edge.
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        agents: usize,
        graph: Option<&Graph>,
    ) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidParameter {
                name: "agents",
                reason: "must be at least 1",
            });
        }
        if !q.is_square() {
            return Err(Error::dims("Q columns", q.nrows(), q.ncols()));
        }
        if !r.is_square() {
            return Err(Error::dims("R columns", r.nrows(), r.ncols()));
        }
        if q.nrows() % agents != 0 || q.nrows() == 0 {
            return Err(Error::dims(
                "Q rows (multiple of agent count)",
                agents,
                q.nrows(),
            ));
        }
        if r.nrows() % agents != 0 || r.nrows() == 0 {
            return Err(Error::dims(
                "R rows (multiple of agent count)",
                agents,
                r.nrows(),
            ));
        }
        if !is_symmetric(&q, SYMMETRY_TOL) {
            return Err(Error::NotSymmetric { matrix: "Q" });
        }
        if !is_symmetric(&r, SYMMETRY_TOL) {
            return Err(Error::NotSymmetric { matrix: "R" });
        }
        let q_min = symmetric_eigenvalues(&q)[0];
        if q_min < -PSD_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: q_min,
            });
        }
        let r_min = symmetric_eigenvalues(&r)[0];
        if !(r_min > 0.0) {
            return Err(Error::NotPd {
                min_eigenvalue: r_min,
            });
        }
        let state_dim = q.nrows() / agents;
        let control_dim = r.nrows() / agents;
        if let Some(g) = graph {
            if g.agent_count() != agents {
                return Err(Error::dims("graph agent count", agents, g.agent_count()));
            }
            for i in 0..agents {
                for j in 0..agents {
                    if i == j || g.are_neighbors(i, j) {
                        continue;
                    }
                    if !block_is_zero(&q, i, j, state_dim) || !block_is_zero(&r, i, j, control_dim)
                    {
                        return Err(Error::TopologyViolation { i, j });
                    }
                }
            }
        }
        let r_inverse = r
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::NotPd {
                min_eigenvalue: r_min,
            })?;
        let block_diagonal = (0..agents)
            .all(|i| (0..agents).all(|j| i == j || block_is_zero(&r, i, j, control_dim)));
        let r_block_inverses = block_diagonal.then(|| {
            (0..agents)
                .map(|i| {
                    r.view(
                        (i * control_dim, i * control_dim),
                        (control_dim, control_dim),
                    )
                    .into_owned()
                    .cholesky()
                    .expect("diagonal block of a positive definite matrix")
                    .inverse()
                })
                .collect()
        });
        let q_slices = (0..agents)
            .map(|i| row_slice(&q, i, state_dim, agents))
            .collect();
        let r_slices = (0..agents)
            .map(|i| row_slice(&r, i, control_dim, agents))
            .collect();
        Ok(CostSpec {
            agents,
            state_dim,
            control_dim,
            q,
            r,
            r_inverse,
            q_slices,
            r_slices,
            r_block_inverses,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Per-agent state dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Per-agent control dimension `m`.
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inverse(&self) -> &DMatrix<f64> {
        &self.r_inverse
    }

    /// `Q̃ᵢ`.
    pub fn q_slice(&self, i: usize) -> &DMatrix<f64> {
        &self.q_slices[i]
    }

    /// `R̃ᵢ`.
    pub fn r_slice(&self, i: usize) -> &DMatrix<f64> {
        &self.r_slices[i]
    }

    pub fn is_r_block_diagonal(&self) -> bool {
        self.r_block_inverses.is_some()
    }

    /// `Rᵢ⁻¹`, available only when `R` is block diagonal.
    pub fn r_block_inverse(&self, i: usize) -> Result<&DMatrix<f64>> {
        let blocks = self
            .r_block_inverses
            .as_ref()
            .ok_or(Error::RNotBlockDiagonal)?;
        blocks.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.agents,
        })
    }

    /// `R̄ᵢ = diag{0,…,Rᵢ⁻¹,…,0}`.
    pub fn r_bar(&self, i: usize) -> Result<DMatrix<f64>> {
        let inv = self.r_block_inverse(i)?;
        let m = self.control_dim;
        let mut out = DMatrix::zeros(m * self.agents, m * self.agents);
        out.view_mut((i * m, i * m), (m, m)).copy_from(inv);
        Ok(out)
    }

    fn check(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.q.nrows() {
            return Err(Error::dims("state", self.q.nrows(), x.len()));
        }
        if u.len() != self.r.nrows() {
            return Err(Error::dims("control", self.r.nrows(), u.len()));
        }
        Ok(())
    }

    /// `½xᵀQx + ½uᵀRu`.
    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check(x, u)?;
        Ok(0.5 * quadratic_form(&self.q, x) + 0.5 * quadratic_form(&self.r, u))
    }

    /// `½xᵀQ̃ᵢx + ½uᵀR̃ᵢu`; only the average over agents is guaranteed non-negative.
    pub fn local_running_cost(&self, i: usize, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check(x, u)?;
        if i >= self.agents {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.agents,
            });
        }
        Ok(0.5 * quadratic_form(&self.q_slices[i], x) + 0.5 * quadratic_form(&self.r_slices[i], u))
    }

    /// Trapezoid quadrature of the running cost over the grid.
    pub fn performance_index(
        &self,
        states: &GridField,
        controls: &GridField,
        grid: &TimeGrid,
    ) -> Result<f64> {
        if states.len() != grid.len() {
            return Err(Error::dims("state samples", grid.len(), states.len()));
        }
        if controls.len() != grid.len() {
            return Err(Error::dims("control samples", grid.len(), controls.len()));
        }
        let costs = (0..grid.len())
            .map(|n| self.running_cost(states.node(n), controls.node(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(trapezoid(&costs, grid.dt()))
    }
}

pub(crate) fn quadratic_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    v.dot(&(m * &v))
}

pub(crate) fn trapezoid(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// The five-vehicle weighting: blocks of 2I/−2I/6I/4I on the path-with-branch topology.
    pub(crate) fn ugv_q() -> DMatrix<f64> {
        let coeffs = [
            [2.0, -2.0, 0.0, 0.0, 0.0],
            [-2.0, 6.0, -2.0, 0.0, -2.0],
            [0.0, -2.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 2.0, -2.0],
            [0.0, -2.0, 0.0, -2.0, 4.0],
        ];
        let mut q = DMatrix::zeros(15, 15);
        for i in 0..5 {
            for j in 0..5 {
                for d in 0..3 {
                    q[(3 * i + d, 3 * j + d)] = coeffs[i][j];
                }
            }
        }
        q
    }

    fn ugv_graph() -> Graph {
        Graph::new(5, &[(0, 1, 1.0), (1, 2, 1.0), (1, 4, 1.0), (3, 4, 1.0)]).unwrap()
    }

    #[test]
    fn ugv_weights_match_topology() {
        let spec = CostSpec::new(
            ugv_q(),
            DMatrix::identity(10, 10) * 0.01,
            5,
            Some(&ugv_graph()),
        )
        .unwrap();
        assert_eq!(spec.state_dim(), 3);
        assert_eq!(spec.control_dim(), 2);
        assert!(spec.is_r_block_diagonal());
        // A path graph lacks the (2,5) and (4,5) edges that Q couples.
        let path = Graph::new(5, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)]).unwrap();
        assert!(matches!(
            CostSpec::new(ugv_q(), DMatrix::identity(10, 10), 5, Some(&path)),
            Err(Error::TopologyViolation { i: 1, j: 4 })
        ));
    }

    #[test]
    fn rejects_indefinite_weights() {
        assert!(matches!(
            CostSpec::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 2), 2, None),
            Err(Error::NotPsd { .. })
        ));
        assert!(matches!(
            CostSpec::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), 2, None),
            Err(Error::NotPd { .. })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            CostSpec::new(asym, DMatrix::identity(2, 2), 2, None),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn slices_of_two_agents() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 3.0]);
        let spec = CostSpec::new(q.clone(), DMatrix::identity(2, 2), 2, None).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[4.0, -2.0, 0.0, 0.0]);
        assert_eq!(spec.q_slice(0), &expected);
        assert_eq!((spec.q_slice(0) + spec.q_slice(1)) / 2.0, q);
    }

    #[test]
    fn running_cost_values() {
        let spec = CostSpec::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::identity(1, 1),
            1,
            None,
        )
        .unwrap();
        assert_eq!(spec.running_cost(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(spec.running_cost(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(
            spec.local_running_cost(0, &[1.3], &[0.2]).unwrap(),
            spec.running_cost(&[1.3], &[0.2]).unwrap()
        );
        assert!(matches!(
            spec.running_cost(&[1.0, 2.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn local_cost_ignores_other_blocks_with_diagonal_q() {
        let spec = CostSpec::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
            DMatrix::identity(3, 3),
            3,
            None,
        )
        .unwrap();
        let x = [0.0, 4.0, 0.0];
        let u = [0.0; 3];
        assert_eq!(spec.local_running_cost(0, &x, &u).unwrap(), 0.0);
        assert_eq!(
            spec.local_running_cost(1, &x, &u).unwrap(),
            0.5 * 3.0 * 2.0 * 16.0
        );
    }

    #[test]
    fn performance_index_of_constants() {
        let spec = CostSpec::new(
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::identity(1, 1),
            1,
            None,
        )
        .unwrap();
        let grid = TimeGrid::new(2.0, 21).unwrap();
        let xs = GridField::from_matrix(DMatrix::from_element(1, 21, 0.5));
        let us = GridField::zeros(1, 21);
        let c = 0.5 * 3.0 * 0.25;
        assert!((spec.performance_index(&xs, &us, &grid).unwrap() - 2.0 * c).abs() < 1e-12);
        let zeros = GridField::zeros(1, 21);
        assert_eq!(spec.performance_index(&zeros, &us, &grid).unwrap(), 0.0);
    }

    #[test]
    fn r_bar_selects_own_block() {
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let spec = CostSpec::new(DMatrix::identity(2, 2), r.clone(), 2, None).unwrap();
        let prod = spec.r_bar(1).unwrap() * r;
        assert_eq!(prod, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn coupled_r_is_central_only() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let spec = CostSpec::new(DMatrix::identity(2, 2), r, 2, None).unwrap();
        assert!(!spec.is_r_block_diagonal());
        assert_eq!(spec.r_bar(0).unwrap_err(), Error::RNotBlockDiagonal);
    }
}
