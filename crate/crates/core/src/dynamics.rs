//! Agent models `ẋᵢ = fᵢ(xᵢ) + gᵢ(xᵢ)uᵢ`, the block lifts that embed one agent into the
//! stacked state, the shared time grid and trajectory integration.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{ComplexField, DMatrix, DVector, DVectorView};

use crate::{Error, Result};

/// Dynamics affine in the control input.
pub trait ControlAffine: fmt::Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Drift `f(x)`.
    fn drift(&self, x: &[f64]) -> DVector<f64>;
    /// Input map `g(x)`, `state_dim × control_dim`.
    fn input_map(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Planar unicycle: state `(r_x, r_y, θ)`, control `(v, ω)`, no drift.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Unicycle;

impl ControlAffine for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(3)
    }

    fn input_map(&self, x: &[f64]) -> DMatrix<f64> {
        let theta = x[2];
        DMatrix::from_row_slice(3, 2, &[theta.cos(), 0.0, theta.sin(), 0.0, 0.0, 1.0])
    }
}

/// `ẋ = Ax + Bu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims("A columns", a.nrows(), a.ncols()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dims("B rows", a.nrows(), b.nrows()));
        }
        Ok(LinearSystem { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl ControlAffine for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, x: &[f64]) -> DVector<f64> {
        &self.a * DVectorView::from_slice(x, x.len())
    }

    fn input_map(&self, _x: &[f64]) -> DMatrix<f64> {
        self.b.clone()
    }
}

/// One agent's private dynamics and initial state.
#[derive(Clone)]
pub struct AgentModel {
    dynamics: Arc<dyn ControlAffine>,
    x0: DVector<f64>,
}

impl fmt::Debug for AgentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentModel")
            .field("dynamics", &self.dynamics)
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl AgentModel {
    pub fn new(dynamics: impl ControlAffine + 'static, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != dynamics.state_dim() {
            return Err(Error::dims("x0", dynamics.state_dim(), x0.len()));
        }
        Ok(AgentModel {
            dynamics: Arc::new(dynamics),
            x0,
        })
    }

    pub fn unicycle(x0: [f64; 3]) -> Self {
        AgentModel {
            dynamics: Arc::new(Unicycle),
            x0: DVector::from_column_slice(&x0),
        }
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        AgentModel::new(LinearSystem::new(a, b)?, x0)
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        self.dynamics.drift(x)
    }

    pub fn input_map(&self, x: &[f64]) -> DMatrix<f64> {
        self.dynamics.input_map(x)
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn dynamics(&self) -> &dyn ControlAffine {
        self.dynamics.as_ref()
    }
}

/// Uniform grid `t_n = nΔt`, `n = 0..nodes`, with `t_0 = 0` and `t_last = horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    nodes: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidParameter {
                name: "time_steps",
                reason: "need at least two grid nodes",
            });
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter {
                name: "horizon",
                reason: "must be positive and finite",
            });
        }
        Ok(TimeGrid { horizon, nodes })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.nodes - 1) as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n + 1 == self.nodes {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes).map(|n| self.time(n))
    }

    /// Index of the interval containing `t` and the fractional position inside it.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let f = (t / self.dt()).clamp(0.0, (self.nodes - 1) as f64);
        let n = (f as usize).min(self.nodes - 2);
        (n, f - n as f64)
    }
}

/// A vector-valued signal sampled on every node of a [`TimeGrid`].
///
/// Stored as a `dim × nodes` matrix; scalar signals have `dim == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    values: DMatrix<f64>,
}

impl GridField {
    pub fn zeros(dim: usize, nodes: usize) -> Self {
        GridField {
            values: DMatrix::zeros(dim, nodes),
        }
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        GridField { values }
    }

    pub fn from_scalars(values: &[f64]) -> Self {
        GridField {
            values: DMatrix::from_row_slice(1, values.len(), values),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn at(&self, n: usize) -> DVector<f64> {
        self.values.column(n).into_owned()
    }

    pub fn node(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.values.as_slice()[n * d..(n + 1) * d]
    }

    pub fn node_mut(&mut self, n: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.values.as_mut_slice()[n * d..(n + 1) * d]
    }

    pub fn set(&mut self, n: usize, v: &[f64]) {
        self.node_mut(n).copy_from_slice(v);
    }

    /// Value of a scalar field at node `n`.
    pub fn scalar(&self, n: usize) -> f64 {
        self.values[(0, n)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn as_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    /// Euclidean norm at every node.
    pub fn node_norms(&self) -> Vec<f64> {
        self.values.column_iter().map(|c| c.norm()).collect()
    }

    /// `max_n ‖v(t_n)‖`.
    pub fn sup_norm(&self) -> f64 {
        self.node_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_agent(i: usize, agents: usize) -> Result<()> {
    if i >= agents {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: agents,
        });
    }
    Ok(())
}

/// Embeds `v` as block `i` of a length `agents·len(v)` vector, scaled by `agents`.
pub fn lift_drift(i: usize, agents: usize, v: &[f64]) -> Result<DVector<f64>> {
    check_agent(i, agents)?;
    let n = v.len();
    let mut out = DVector::zeros(n * agents);
    let scale = agents as f64;
    for (dst, src) in out.as_mut_slice()[i * n..(i + 1) * n].iter_mut().zip(v) {
        *dst = scale * src;
    }
    Ok(out)
}

/// Same embedding as [`lift_drift`], applied to an initial state.
pub fn lift_initial(i: usize, agents: usize, x0: &[f64]) -> Result<DVector<f64>> {
    lift_drift(i, agents, x0)
}

/// Block-diagonal embedding of `g` at block `(i, i)`, scaled by `agents`.
pub fn lift_input(i: usize, agents: usize, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_agent(i, agents)?;
    let (n, m) = g.shape();
    if n == 0 || m == 0 {
        return Err(Error::dims("input map", 1, 0));
    }
    let mut out = DMatrix::zeros(n * agents, m * agents);
    out.view_mut((i * n, i * m), (n, m))
        .copy_from(&(g * agents as f64));
    Ok(out)
}

/// Stacked closed-loop vector field `(f₁ + g₁u₁, …, f_N + g_N u_N)`.
pub fn stacked_vector_field(models: &[AgentModel], x: &[f64], u: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.len());
    let (mut xo, mut uo) = (0, 0);
    for model in models {
        let (n, m) = (model.state_dim(), model.control_dim());
        let xi = &x[xo..xo + n];
        let ui = DVectorView::from_slice(&u[uo..uo + m], m);
        let dx = model.drift(xi) + model.input_map(xi) * ui;
        out.rows_mut(xo, n).copy_from(&dx);
        xo += n;
        uo += m;
    }
    out
}

fn stacked_dims(models: &[AgentModel]) -> (usize, usize) {
    models.iter().fold((0, 0), |(n, m), model| {
        (n + model.state_dim(), m + model.control_dim())
    })
}

/// Integrates the stacked system under `controller` with classical RK4 on `grid`.
///
/// The controller receives `(t, x)` and returns the stacked control.
pub fn rollout<C>(models: &[AgentModel], controller: C, grid: &TimeGrid) -> Result<GridField>
where
    C: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let (state_dim, control_dim) = stacked_dims(models);
    let mut x = DVector::zeros(state_dim);
    let mut offset = 0;
    for model in models {
        x.rows_mut(offset, model.state_dim()).copy_from(model.x0());
        offset += model.state_dim();
    }
    let mut states = GridField::zeros(state_dim, grid.len());
    states.set(0, x.as_slice());
    let dt = grid.dt();
    let rhs = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let u = controller(t, x);
        if u.len() != control_dim {
            return Err(Error::dims("controller output", control_dim, u.len()));
        }
        Ok(stacked_vector_field(models, x.as_slice(), u.as_slice()))
    };
    for n in 0..grid.len() - 1 {
        let t = grid.time(n);
        let k1 = rhs(t, &x)?;
        let k2 = rhs(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)))?;
        let k3 = rhs(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)))?;
        let k4 = rhs(t + dt, &(&x + &k3 * dt))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                time: grid.time(n + 1),
            });
        }
        states.set(n + 1, x.as_slice());
    }
    Ok(states)
}

/// Samples `controller(t_n, x(t_n))` along a trajectory.
pub fn sample_controls<C>(states: &GridField, controller: C, grid: &TimeGrid) -> GridField
where
    C: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let columns: Vec<DVector<f64>> = (0..grid.len())
        .map(|n| controller(grid.time(n), &states.at(n)))
        .collect();
    GridField::from_matrix(DMatrix::from_columns(&columns))
}

/// `∫₀^{t_n} v(τ) dτ` at every node by the cumulative trapezoid rule.
pub fn cumulative_trapezoid(values: &GridField, grid: &TimeGrid) -> GridField {
    let dim = values.dim();
    let half = 0.5 * grid.dt();
    let mut out = GridField::zeros(dim, values.len());
    for n in 1..values.len() {
        for d in 0..dim {
            let prev = out.as_matrix()[(d, n - 1)];
            let inc = half * (values.as_matrix()[(d, n - 1)] + values.as_matrix()[(d, n)]);
            out.as_matrix_mut()[(d, n)] = prev + inc;
        }
    }
    out
}

/// Largest central-difference derivative of `f` and `g` over `points`.
///
/// A cheap diagnostic that the model is smooth on the region it will be queried on;
/// finite output is all it promises.
pub fn smoothness_probe(model: &AgentModel, points: &[DVector<f64>], step: f64) -> f64 {
    let n = model.state_dim();
    let mut worst = 0.0f64;
    for p in points {
        for d in 0..n {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[d] += step;
            minus[d] -= step;
            let df = (model.drift(plus.as_slice()) - model.drift(minus.as_slice())) / (2.0 * step);
            let dg = (model.input_map(plus.as_slice()) - model.input_map(minus.as_slice()))
                / (2.0 * step);
            worst = worst.max(df.amax()).max(dg.amax());
        }
    }
    worst
}
