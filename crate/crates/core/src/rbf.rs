//! Inverse multiquadric collocation for the linear transport PDE
//! `V_t + ∇V·F + l = 0`, `V(T, ·) = 0`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{ComplexField, DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{GridField, TimeGrid};
use crate::linalg::Factored;
use crate::{Error, Result};

/// Largest accepted condition estimate of a backward-Euler system.
pub const COND_MAX: f64 = 1e12;
/// Centers closer than this are rejected.
pub const MIN_CENTER_SEPARATION: f64 = 1e-8;

/// `φⱼ(x) = 1/√(‖x − cⱼ‖² + z²)` on a fixed set of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfBasis {
    centers: DMatrix<f64>,
    shape: f64,
}

impl RbfBasis {
    /// `centers` holds one center per column.
    pub fn new(centers: DMatrix<f64>, shape: f64) -> Result<Self> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::NonPositiveShape { shape });
        }
        if centers.ncols() == 0 || centers.nrows() == 0 {
            return Err(Error::InvalidParameter {
                name: "centers",
                reason: "at least one center of positive dimension is required",
            });
        }
        if !centers.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "centers",
                reason: "coordinates must be finite",
            });
        }
        let m = centers.ncols();
        for a in 0..m {
            for b in (a + 1)..m {
                if (centers.column(a) - centers.column(b)).norm() <= MIN_CENTER_SEPARATION {
                    return Err(Error::DegeneratePoints { a, b });
                }
            }
        }
        Ok(RbfBasis { centers, shape })
    }

    pub fn dim(&self) -> usize {
        self.centers.nrows()
    }

    pub fn len(&self) -> usize {
        self.centers.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.ncols() == 0
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    fn sq_dist(&self, j: usize, x: &[f64]) -> f64 {
        self.centers
            .column(j)
            .iter()
            .zip(x)
            .map(|(c, x)| (x - c) * (x - c))
            .sum()
    }

    pub fn phi(&self, j: usize, x: &[f64]) -> f64 {
        1.0 / ComplexField::sqrt(self.sq_dist(j, x) + self.shape * self.shape)
    }

    /// `∇φⱼ(x) = −(x − cⱼ)/(‖x − cⱼ‖² + z²)^{3/2}`.
    pub fn grad_phi(&self, j: usize, x: &[f64]) -> DVector<f64> {
        let s = self.sq_dist(j, x) + self.shape * self.shape;
        let w = 1.0 / (s * ComplexField::sqrt(s));
        DVector::from_iterator(
            self.dim(),
            self.centers
                .column(j)
                .iter()
                .zip(x)
                .map(|(c, x)| -w * (x - c)),
        )
    }

    /// All basis functions evaluated at `x`.
    pub fn values(&self, x: &[f64]) -> RowDVector<f64> {
        RowDVector::from_iterator(self.len(), (0..self.len()).map(|j| self.phi(j, x)))
    }

    /// `Σⱼ θⱼ φⱼ(x)`.
    pub fn value(&self, theta: &[f64], x: &[f64]) -> f64 {
        theta
            .iter()
            .enumerate()
            .map(|(j, t)| t * self.phi(j, x))
            .sum()
    }

    /// `Σⱼ θⱼ ∇φⱼ(x)`.
    pub fn gradient(&self, theta: &[f64], x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        let z2 = self.shape * self.shape;
        for (j, t) in theta.iter().enumerate() {
            let c = self.centers.column(j);
            let s = self.sq_dist(j, x) + z2;
            let w = t / (s * ComplexField::sqrt(s));
            for (d, gd) in g.iter_mut().enumerate() {
                *gd -= w * (x[d] - c[d]);
            }
        }
        g
    }
}

/// Precomputed quantities of a basis collocated at its own centers.
///
/// `A_bj = φ_b(c_j)` and `W_bj = (‖c_j − c_b‖² + z²)^{-3/2}`.
#[derive(Debug, Clone)]
pub struct Collocation {
    basis: Arc<RbfBasis>,
    a: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl Collocation {
    pub fn new(basis: Arc<RbfBasis>) -> Self {
        let m = basis.len();
        let z2 = basis.shape() * basis.shape();
        let mut a = DMatrix::zeros(m, m);
        let mut w = DMatrix::zeros(m, m);
        for j in 0..m {
            let cj = basis.centers().column(j);
            for b in 0..m {
                let s = (basis.centers().column(b) - cj).norm_squared() + z2;
                let r = ComplexField::sqrt(s);
                a[(b, j)] = 1.0 / r;
                w[(b, j)] = 1.0 / (s * r);
            }
        }
        Collocation { basis, a, w }
    }

    pub fn basis(&self) -> &Arc<RbfBasis> {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// The collocation matrix `A`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `B_bj = ∇φ_b(c_j)·F_j` for velocities `F` given one column per center.
    pub fn advection_matrix(&self, velocities: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (d, m) = (self.dim(), self.len());
        if velocities.nrows() != d || velocities.ncols() != m {
            return Err(Error::dims(
                "velocity field entries",
                d * m,
                velocities.nrows() * velocities.ncols(),
            ));
        }
        let centers = self.basis.centers();
        // P_bj = c_b·F_j
        let p = centers.transpose() * velocities;
        let own: Vec<f64> = (0..m)
            .map(|j| centers.column(j).dot(&velocities.column(j)))
            .collect();
        Ok(DMatrix::from_fn(m, m, |b, j| {
            -self.w[(b, j)] * (own[j] - p[(b, j)])
        }))
    }

    /// Values `V(c_j)` for the row of coefficients `theta`.
    pub fn values_at_centers(&self, theta: &RowDVector<f64>) -> RowDVector<f64> {
        theta * &self.a
    }

    /// `∇V(c_j)` for every center, one column each.
    pub fn gradients_at_centers(&self, theta: &[f64]) -> DMatrix<f64> {
        let (d, m) = (self.dim(), self.len());
        let centers = self.basis.centers();
        let mut weighted = self.w.clone();
        for (b, t) in theta.iter().enumerate() {
            weighted.row_mut(b).scale_mut(*t);
        }
        let sums: Vec<f64> = (0..m).map(|j| weighted.column(j).sum()).collect();
        let mut g = centers * &weighted;
        for j in 0..m {
            for k in 0..d {
                g[(k, j)] -= centers[(k, j)] * sums[j];
            }
        }
        g
    }
}

/// Transport velocity and source sampled at every time node and center.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeFields {
    /// `F(t_n, c_j)`: one `dim × M` matrix per node.
    pub advection: Vec<DMatrix<f64>>,
    /// `l(t_n, c_j)`: `N_t × M`.
    pub source: DMatrix<f64>,
}

impl PdeFields {
    pub fn zeros(nodes: usize, dim: usize, centers: usize) -> Self {
        PdeFields {
            advection: alloc::vec![DMatrix::zeros(dim, centers); nodes],
            source: DMatrix::zeros(nodes, centers),
        }
    }

    fn check(&self, colloc: &Collocation, grid: &TimeGrid) -> Result<()> {
        if self.advection.len() != grid.len() {
            return Err(Error::dims(
                "advection nodes",
                grid.len(),
                self.advection.len(),
            ));
        }
        if self.source.nrows() != grid.len() || self.source.ncols() != colloc.len() {
            return Err(Error::dims(
                "source entries",
                grid.len() * colloc.len(),
                self.source.nrows() * self.source.ncols(),
            ));
        }
        Ok(())
    }
}

/// Coefficients `Θ` of an approximate value function, one row per time node.
#[derive(Debug, Clone)]
pub struct ValueApprox {
    basis: Arc<RbfBasis>,
    grid: TimeGrid,
    theta: DMatrix<f64>,
    max_condition: f64,
}

impl ValueApprox {
    /// The identically zero value function.
    pub fn zero(basis: Arc<RbfBasis>, grid: TimeGrid) -> Self {
        let m = basis.len();
        ValueApprox {
            basis,
            theta: DMatrix::zeros(grid.len(), m),
            grid,
            max_condition: 0.0,
        }
    }

    pub fn from_coefficients(
        basis: Arc<RbfBasis>,
        grid: TimeGrid,
        theta: DMatrix<f64>,
    ) -> Result<Self> {
        if theta.nrows() != grid.len() || theta.ncols() != basis.len() {
            return Err(Error::dims(
                "coefficient entries",
                grid.len() * basis.len(),
                theta.nrows() * theta.ncols(),
            ));
        }
        Ok(ValueApprox {
            basis,
            grid,
            theta,
            max_condition: 0.0,
        })
    }

    pub fn basis(&self) -> &Arc<RbfBasis> {
        &self.basis
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// Row `n` of `Θ`.
    pub fn node_coefficients(&self, n: usize) -> Vec<f64> {
        self.theta.row(n).iter().copied().collect()
    }

    /// Largest condition estimate met while solving; zero if not solved.
    pub fn max_condition(&self) -> f64 {
        self.max_condition
    }

    pub fn value(&self, n: usize, x: &[f64]) -> f64 {
        self.basis.value(&self.node_coefficients(n), x)
    }

    pub fn gradient(&self, n: usize, x: &[f64]) -> DVector<f64> {
        self.basis.gradient(&self.node_coefficients(n), x)
    }

    /// Coefficients at time `t`, linear between nodes.
    pub fn coefficients_at(&self, t: f64) -> Vec<f64> {
        let (n, frac) = self.grid.locate(t);
        if frac == 0.0 || n + 1 >= self.grid.len() {
            return self.node_coefficients(n);
        }
        self.theta
            .row(n)
            .iter()
            .zip(self.theta.row(n + 1).iter())
            .map(|(a, b)| a + frac * (b - a))
            .collect()
    }

    pub fn value_at(&self, t: f64, x: &[f64]) -> f64 {
        self.basis.value(&self.coefficients_at(t), x)
    }

    pub fn gradient_at(&self, t: f64, x: &[f64]) -> DVector<f64> {
        self.basis.gradient(&self.coefficients_at(t), x)
    }

    /// `V(t_n, c_j)`: `N_t × M`.
    pub fn values_at_centers(&self, colloc: &Collocation) -> DMatrix<f64> {
        &self.theta * colloc.matrix()
    }
}

/// One backward-Euler step: solves `Θₙ(A − ΔtBₙ) = Θₙ₊₁A + ΔtLₙ` for `Θₙ`.
pub fn backward_step(
    colloc: &Collocation,
    advection: &DMatrix<f64>,
    next: &RowDVector<f64>,
    source: &RowDVector<f64>,
    dt: f64,
    node: usize,
) -> Result<(RowDVector<f64>, f64)> {
    let b = colloc.advection_matrix(advection)?;
    let system = colloc.matrix() - b * dt;
    let factored = Factored::new(system);
    let condition = factored.condition();
    if !(condition <= COND_MAX) {
        return Err(Error::SingularSystem { node, condition });
    }
    let rhs = (next * colloc.matrix() + source * dt).transpose();
    let theta = factored
        .solve_transposed(&rhs)
        .ok_or(Error::SingularSystem { node, condition })?;
    Ok((theta.transpose(), condition))
}

/// Marches `Θ` backward from `Θ(T) = 0` through the whole grid.
pub fn solve_linear_pde(
    colloc: &Collocation,
    fields: &PdeFields,
    grid: &TimeGrid,
) -> Result<ValueApprox> {
    fields.check(colloc, grid)?;
    let m = colloc.len();
    let nodes = grid.len();
    let mut theta = DMatrix::zeros(nodes, m);
    let mut max_condition: f64 = 0.0;
    let dt = grid.dt();
    for n in (0..nodes - 1).rev() {
        let next = theta.row(n + 1).into_owned();
        let source = fields.source.row(n).into_owned();
        let (row, cond) = backward_step(colloc, &fields.advection[n], &next, &source, dt, n)?;
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularSystem {
                node: n,
                condition: cond,
            });
        }
        theta.row_mut(n).copy_from(&row);
        max_condition = max_condition.max(cond);
    }
    Ok(ValueApprox {
        basis: colloc.basis().clone(),
        grid: *grid,
        theta,
        max_condition,
    })
}

/// Largest entry of `(Θₙ₊₁ − Θₙ)/Δt·A + ΘₙBₙ + Lₙ` over all steps.
pub fn pde_residual(
    colloc: &Collocation,
    fields: &PdeFields,
    grid: &TimeGrid,
    approx: &ValueApprox,
) -> Result<f64> {
    fields.check(colloc, grid)?;
    let theta = approx.coefficients();
    let dt = grid.dt();
    let mut worst: f64 = 0.0;
    for n in 0..grid.len() - 1 {
        let b = colloc.advection_matrix(&fields.advection[n])?;
        let r = (theta.row(n + 1) - theta.row(n)) / dt * colloc.matrix()
            + theta.row(n) * b
            + fields.source.row(n);
        worst = worst.max(r.amax());
    }
    Ok(worst)
}

/// An axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dims("upper bound", lower.len(), upper.len()));
        }
        if lower.is_empty()
            || lower
                .iter()
                .zip(upper.iter())
                .any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::EmptyBounds);
        }
        Ok(Bounds { lower, upper })
    }

    /// The per-coordinate hull of the agents' initial states, widened by half
    /// about its center and repeated once per agent block.
    pub fn around_initial_states(x0: &[DVector<f64>]) -> Result<Self> {
        let first = x0.first().ok_or(Error::EmptyBounds)?;
        let n = first.len();
        if let Some(bad) = x0.iter().find(|x| x.len() != n) {
            return Err(Error::dims("initial state", n, bad.len()));
        }
        let mut lower = DVector::zeros(n * x0.len());
        let mut upper = DVector::zeros(n * x0.len());
        for k in 0..n {
            let lo = x0.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
            let hi = x0.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
            let mid = 0.5 * (lo + hi);
            let half = (0.75 * (hi - lo)).max(0.5);
            for i in 0..x0.len() {
                lower[i * n + k] = mid - half;
                upper[i * n + k] = mid + half;
            }
        }
        Bounds::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while out.len() < count {
        if out
            .iter()
            .take_while(|p| *p * *p <= candidate)
            .all(|p| candidate % p != 0)
        {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    out
}

/// `count` Halton points in `bounds`, starting at sequence index `offset + 1`.
pub fn halton_points(bounds: &Bounds, count: usize, offset: u64) -> DMatrix<f64> {
    let d = bounds.dim();
    let bases = primes(d);
    DMatrix::from_fn(d, count, |k, j| {
        let u = radical_inverse(offset + 1 + j as u64, bases[k]);
        bounds.lower[k] + u * bounds.width(k)
    })
}

/// `count` points spread along a stacked trajectory, each jittered uniformly
/// by up to half the box width per coordinate.
pub fn trajectory_points(
    trajectory: &GridField,
    bounds: &Bounds,
    count: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if trajectory.dim() != bounds.dim() {
        return Err(Error::dims(
            "trajectory dimension",
            bounds.dim(),
            trajectory.dim(),
        ));
    }
    if trajectory.is_empty() {
        return Err(Error::InvalidParameter {
            name: "trajectory",
            reason: "needs at least one sample",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = trajectory.len() - 1;
    let mut out = DMatrix::zeros(bounds.dim(), count);
    for j in 0..count {
        let node = if count > 1 {
            (j * last + (count - 1) / 2) / (count - 1)
        } else {
            0
        };
        let base = trajectory.node(node);
        for k in 0..bounds.dim() {
            let half = 0.5 * bounds.width(k);
            out[(k, j)] = base[k] + rng.random_range(-half..half);
        }
    }
    Ok(out)
}

/// How the collocation centers are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterStrategy {
    HaltonBox,
    Trajectory,
}

impl core::str::FromStr for CenterStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halton-box" => Ok(CenterStrategy::HaltonBox),
            "trajectory" => Ok(CenterStrategy::Trajectory),
            other => Err(Error::UnknownRule(other.into())),
        }
    }
}
