//! Centralized value iteration on the augmented system, plus a Riccati oracle.

use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::cost::CostSpec;
use crate::dynamics::{lift_drift, lift_input, rollout, AgentModel, GridField, TimeGrid};
use crate::rbf::{solve_linear_pde, Collocation, PdeFields, ValueApprox};
use crate::{Error, Result};

/// Value-iteration sweeps stop early once `V` moves less than this at every center.
pub const VI_TOL: f64 = 1e-6;

/// The stacked system `ẋ = f(x) + g(x)u` of all agents with its global cost.
#[derive(Debug, Clone)]
pub struct GlobalSystem {
    models: Vec<AgentModel>,
    cost: CostSpec,
}

impl GlobalSystem {
    /// All agents must share state and control dimensions matching the cost blocks.
    pub fn new(models: Vec<AgentModel>, cost: CostSpec) -> Result<Self> {
        if models.len() != cost.agents() {
            return Err(Error::dims("agent models", cost.agents(), models.len()));
        }
        for model in &models {
            if model.state_dim() != cost.state_dim() {
                return Err(Error::dims(
                    "agent state",
                    cost.state_dim(),
                    model.state_dim(),
                ));
            }
            if model.control_dim() != cost.control_dim() {
                return Err(Error::dims(
                    "agent control",
                    cost.control_dim(),
                    model.control_dim(),
                ));
            }
        }
        Ok(GlobalSystem { models, cost })
    }

    pub fn models(&self) -> &[AgentModel] {
        &self.models
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn agents(&self) -> usize {
        self.models.len()
    }

    /// `nN`.
    pub fn state_dim(&self) -> usize {
        self.cost.state_dim() * self.agents()
    }

    /// `mN`.
    pub fn control_dim(&self) -> usize {
        self.cost.control_dim() * self.agents()
    }

    pub fn x0(&self) -> DVector<f64> {
        let n = self.cost.state_dim();
        let mut out = DVector::zeros(self.state_dim());
        for (i, model) in self.models.iter().enumerate() {
            out.rows_mut(i * n, n).copy_from(model.x0());
        }
        out
    }

    fn block<'a>(&self, i: usize, x: &'a [f64]) -> &'a [f64] {
        let n = self.cost.state_dim();
        &x[i * n..(i + 1) * n]
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("global state", self.state_dim(), x.len()));
        }
        Ok(())
    }

    /// `f(x) = (f₁(x₁), …, f_N(x_N))`.
    pub fn drift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let n = self.cost.state_dim();
        let mut out = DVector::zeros(self.state_dim());
        for (i, model) in self.models.iter().enumerate() {
            out.rows_mut(i * n, n)
                .copy_from(&model.drift(self.block(i, x)));
        }
        Ok(out)
    }

    /// `g(x) = blockdiag(g₁(x₁), …, g_N(x_N))`.
    pub fn input_map(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let (n, m) = (self.cost.state_dim(), self.cost.control_dim());
        let mut out = DMatrix::zeros(self.state_dim(), self.control_dim());
        for (i, model) in self.models.iter().enumerate() {
            out.view_mut((i * n, i * m), (n, m))
                .copy_from(&model.input_map(self.block(i, x)));
        }
        Ok(out)
    }

    /// `(1/N)Σᵢ 𝔣ᵢ(x)`, which equals [`GlobalSystem::drift`].
    pub fn drift_from_lifts(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let agents = self.agents();
        let mut sum = DVector::zeros(self.state_dim());
        for (i, model) in self.models.iter().enumerate() {
            sum += lift_drift(i, agents, model.drift(self.block(i, x)).as_slice())?;
        }
        Ok(sum / agents as f64)
    }

    /// `(1/N)Σᵢ 𝔤ᵢ(x)`, which equals [`GlobalSystem::input_map`].
    pub fn input_map_from_lifts(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let agents = self.agents();
        let mut sum = DMatrix::zeros(self.state_dim(), self.control_dim());
        for (i, model) in self.models.iter().enumerate() {
            sum += lift_input(i, agents, &model.input_map(self.block(i, x)))?;
        }
        Ok(sum / agents as f64)
    }

    /// `u = −R⁻¹g(x)ᵀ∇V(t, x)`.
    pub fn optimal_control(&self, value: &ValueApprox, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        let grad = value.gradient_at(t, x);
        self.control_from_gradient(x, &grad)
    }

    pub(crate) fn control_from_gradient(
        &self,
        x: &[f64],
        grad: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let g = self.input_map(x)?;
        Ok(-(self.cost.r_inverse() * (g.transpose() * grad)))
    }
}

/// Data at the collocation centers that does not change between sweeps.
#[derive(Debug, Clone)]
struct CenterCache {
    drift: DMatrix<f64>,
    input: Vec<DMatrix<f64>>,
    state_cost: Vec<f64>,
}

impl CenterCache {
    fn new(sys: &GlobalSystem, colloc: &Collocation) -> Result<Self> {
        if colloc.dim() != sys.state_dim() {
            return Err(Error::BasisMismatch);
        }
        let centers = colloc.basis().centers();
        let m = colloc.len();
        let mut drift = DMatrix::zeros(sys.state_dim(), m);
        let mut input = Vec::with_capacity(m);
        let mut state_cost = Vec::with_capacity(m);
        let zero_u = alloc::vec![0.0; sys.control_dim()];
        for j in 0..m {
            let c = centers.column(j);
            let c = c.as_slice();
            drift.set_column(j, &sys.drift(c)?);
            input.push(sys.input_map(c)?);
            state_cost.push(sys.cost().running_cost(c, &zero_u)?);
        }
        Ok(CenterCache {
            drift,
            input,
            state_cost,
        })
    }
}

/// One iterate `V^k` with the fields `u^k`, `F^k`, `l^k` it induces at every
/// `(t_n, c_j)`.
#[derive(Debug, Clone)]
pub struct ViState {
    pub k: usize,
    pub value: ValueApprox,
    /// `u^k(t_n, c_j)`: one `mN × M` matrix per node.
    pub controls: Vec<DMatrix<f64>>,
    /// `F^k(t_n, c_j)` packaged for the next PDE solve together with `l^k`.
    pub fields: PdeFields,
    /// `max |V^k − V^{k−1}|` over nodes and centers; `None` for `k = 0`.
    pub sup_change: Option<f64>,
}

/// Centralized value iteration on a fixed basis and grid.
#[derive(Debug, Clone)]
pub struct CentralSolver {
    sys: GlobalSystem,
    colloc: Collocation,
    grid: TimeGrid,
    cache: CenterCache,
}

impl CentralSolver {
    pub fn new(sys: GlobalSystem, colloc: Collocation, grid: TimeGrid) -> Result<Self> {
        let cache = CenterCache::new(&sys, &colloc)?;
        Ok(CentralSolver {
            sys,
            colloc,
            grid,
            cache,
        })
    }

    pub fn system(&self) -> &GlobalSystem {
        &self.sys
    }

    pub fn collocation(&self) -> &Collocation {
        &self.colloc
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn state_for(&self, k: usize, value: ValueApprox, sup_change: Option<f64>) -> Result<ViState> {
        let m = self.colloc.len();
        let nodes = self.grid.len();
        let r = self.sys.cost().r();
        let r_inv = self.sys.cost().r_inverse();
        let mut controls = Vec::with_capacity(nodes);
        let mut fields = PdeFields::zeros(nodes, self.sys.state_dim(), m);
        for n in 0..nodes {
            let grads = self
                .colloc
                .gradients_at_centers(&value.node_coefficients(n));
            let mut u_n = DMatrix::zeros(self.sys.control_dim(), m);
            let vel = &mut fields.advection[n];
            for j in 0..m {
                let g = &self.cache.input[j];
                let u = -(r_inv * (g.transpose() * grads.column(j)));
                let f = self.cache.drift.column(j) + g * &u;
                fields.source[(n, j)] = self.cache.state_cost[j] + 0.5 * u.dot(&(r * &u));
                vel.set_column(j, &f);
                u_n.set_column(j, &u);
            }
            if !u_n.iter().all(|v| v.is_finite()) || !vel.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteField { agent: 0, round: k });
            }
            controls.push(u_n);
        }
        Ok(ViState {
            k,
            value,
            controls,
            fields,
            sup_change,
        })
    }

    /// `V^0 ≡ 0` and its (uncontrolled) fields.
    pub fn initial(&self) -> Result<ViState> {
        let zero = ValueApprox::zero(self.colloc.basis().clone(), self.grid);
        self.state_for(0, zero, None)
    }

    /// Solves the linear PDE driven by `state`'s fields and returns `V^{k+1}`.
    pub fn step(&self, state: &ViState) -> Result<ViState> {
        let next = solve_linear_pde(&self.colloc, &state.fields, &self.grid)?;
        let change = (next.values_at_centers(&self.colloc)
            - state.value.values_at_centers(&self.colloc))
        .amax();
        self.state_for(state.k + 1, next, Some(change))
    }

    /// Up to `sweeps` steps from `V^0`; stops early once the change drops below [`VI_TOL`].
    /// The returned list starts with `V^0`.
    pub fn iterate(&self, sweeps: usize) -> Result<Vec<ViState>> {
        if sweeps == 0 {
            return Err(Error::InvalidParameter {
                name: "K",
                reason: "at least one value-iteration sweep is required",
            });
        }
        let mut states = Vec::with_capacity(sweeps + 1);
        states.push(self.initial()?);
        for _ in 0..sweeps {
            let next = self.step(states.last().expect("non-empty"))?;
            let done = next.sup_change.is_some_and(|c| c < VI_TOL);
            log::debug!("value iteration k={} change={:?}", next.k, next.sup_change);
            let previous = states.last().and_then(|s: &ViState| s.sup_change);
            if let (Some(before), Some(now)) = (previous, next.sup_change) {
                if now > before {
                    log::warn!(
                        "value iteration change grew from {before:.3e} to {now:.3e} at k={}",
                        next.k
                    );
                }
            }
            states.push(next);
            if done {
                break;
            }
        }
        Ok(states)
    }

    /// `max |∂ₜV + ∇V·(f + gu) + ½xᵀQx + ½uᵀRu|` over centers and nodes before the
    /// last, with `u` the control induced by `V` itself and a forward difference in time.
    pub fn hjb_residual(&self, state: &ViState) -> f64 {
        let values = state.value.values_at_centers(&self.colloc);
        let dt = self.grid.dt();
        let mut worst: f64 = 0.0;
        for n in 0..self.grid.len() - 1 {
            let grads = self
                .colloc
                .gradients_at_centers(&state.value.node_coefficients(n));
            for j in 0..self.colloc.len() {
                let vt = (values[(n + 1, j)] - values[(n, j)]) / dt;
                let r = vt
                    + grads.column(j).dot(&state.fields.advection[n].column(j))
                    + state.fields.source[(n, j)];
                worst = worst.max(r.abs());
            }
        }
        worst
    }

    /// Runs value iteration, then closes the loop with the final value function.
    pub fn run(&self, sweeps: usize) -> Result<CentralizedRun> {
        let states = self.iterate(sweeps)?;
        let sup_changes = states.iter().filter_map(|s| s.sup_change).collect();
        let hjb_residuals = states.iter().map(|s| self.hjb_residual(s)).collect();
        let last = states.into_iter().last().expect("non-empty");
        let value = last.value;
        let sys = &self.sys;
        let controller = |t: f64, x: &DVector<f64>| -> DVector<f64> {
            sys.optimal_control(&value, t, x.as_slice())
                .unwrap_or_else(|_| DVector::from_element(sys.control_dim(), f64::NAN))
        };
        let states = rollout(sys.models(), controller, &self.grid)?;
        let nodes = self.grid.len();
        let mut controls = GridField::zeros(sys.control_dim(), nodes);
        let mut velocity = GridField::zeros(sys.state_dim(), nodes);
        let mut running = Vec::with_capacity(nodes);
        let mut values = Vec::with_capacity(nodes);
        for n in 0..nodes {
            let x = states.node(n);
            let grad = value.gradient(n, x);
            let u = sys.control_from_gradient(x, &grad)?;
            let f = sys.drift(x)? + sys.input_map(x)? * &u;
            running.push(sys.cost().running_cost(x, u.as_slice())?);
            values.push(value.value(n, x));
            controls.set(n, u.as_slice());
            velocity.set(n, f.as_slice());
        }
        if !controls.is_finite() || !velocity.is_finite() {
            return Err(Error::NonFiniteState {
                time: self.grid.horizon(),
            });
        }
        let cost = sys
            .cost()
            .performance_index(&states, &controls, &self.grid)?;
        Ok(CentralizedRun {
            value,
            sup_changes,
            hjb_residuals,
            states,
            controls,
            velocity,
            running_cost: GridField::from_scalars(&running),
            value_along: GridField::from_scalars(&values),
            cost,
        })
    }
}

/// Outcome of [`CentralSolver::run`]: the reference the distributed scheme is compared to.
#[derive(Debug, Clone)]
pub struct CentralizedRun {
    pub value: ValueApprox,
    /// Change of `V` per sweep, `k = 1, 2, …`.
    pub sup_changes: Vec<f64>,
    /// HJB residual of each `V^k`, `k = 0, 1, …`.
    pub hjb_residuals: Vec<f64>,
    /// `x(t_n)` under the closed loop.
    pub states: GridField,
    /// `u(t_n, x(t_n))`.
    pub controls: GridField,
    /// `F(t_n, x(t_n))`.
    pub velocity: GridField,
    /// `l(t_n, x(t_n))`.
    pub running_cost: GridField,
    /// `V(t_n, x(t_n))`.
    pub value_along: GridField,
    /// Performance index of the closed loop.
    pub cost: f64,
}

/// Convenience wrapper building the collocation for `basis`.
pub fn centralized_run(
    sys: GlobalSystem,
    basis: Arc<crate::rbf::RbfBasis>,
    grid: TimeGrid,
    sweeps: usize,
) -> Result<CentralizedRun> {
    CentralSolver::new(sys, Collocation::new(basis), grid)?.run(sweeps)
}

/// `P(t_n)` for `−Ṗ = AᵀP + PA − PBR⁻¹BᵀP + Q`, `P(T) = 0`, by RK4 with a few
/// substeps per grid interval.
pub fn riccati_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    const SUBSTEPS: usize = 8;
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::dims("A columns", n, a.ncols()));
    }
    if b.nrows() != n {
        return Err(Error::dims("B rows", n, b.nrows()));
    }
    if q.shape() != (n, n) {
        return Err(Error::dims("Q rows", n, q.nrows()));
    }
    if r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dims("R rows", b.ncols(), r.nrows()));
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or(Error::NotPd {
            min_eigenvalue: f64::NAN,
        })?
        .inverse();
    let s = b * r_inv * b.transpose();
    // dP/dτ in reversed time τ = T − t.
    let rhs = |p: &DMatrix<f64>| a.transpose() * p + p * a - p * &s * p + q;
    let h = grid.dt() / SUBSTEPS as f64;
    let mut p = DMatrix::zeros(n, n);
    let mut out = alloc::vec![DMatrix::zeros(n, n); grid.len()];
    for node in (0..grid.len() - 1).rev() {
        for _ in 0..SUBSTEPS {
            let k1 = rhs(&p);
            let k2 = rhs(&(&p + &k1 * (0.5 * h)));
            let k3 = rhs(&(&p + &k2 * (0.5 * h)));
            let k4 = rhs(&(&p + &k3 * h));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            p = (&p + p.transpose()) * 0.5;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                time: grid.time(node),
            });
        }
        out[node] = p.clone();
    }
    Ok(out)
}
