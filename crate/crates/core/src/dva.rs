//! Distributed value approximation: every agent keeps its own estimate of the
//! augmented trajectory, drift, running cost and value function, refines them by
//! relaxation toward its private target plus neighbor mixing, and solves its own
//! linear PDE each round.
//!
//! Besides the trajectory-valued estimates, each agent runs the same relaxation
//! and mixing on the drift and running cost sampled at the shared collocation
//! centers. Those point fields drive the agent's PDE solve; the trajectory fields
//! are what the monitors report.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::cost::{quadratic_form, CostSpec};
use crate::dynamics::{cumulative_trapezoid, rollout, GridField, TimeGrid};
use crate::graph::{validate_kappa, Graph, MixingConfig};
use crate::hjb::{CentralizedRun, GlobalSystem};
use crate::netsim::{AccessLog, PayloadSize, RoundBus};
use crate::rbf::{solve_linear_pde, Collocation, PdeFields, ValueApprox};
use crate::{Error, Result};

/// Relaxation weights `δ_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `δ_s = 1/s`.
    #[default]
    OneOverS,
    /// `δ_s = 1/(s + 1)`, which keeps every weight strictly below one.
    OneOverSPlusOne,
}

impl StepRule {
    pub fn delta(self, s: usize) -> Result<f64> {
        if s == 0 {
            return Err(Error::InvalidParameter {
                name: "s",
                reason: "rounds are numbered from 1",
            });
        }
        Ok(match self {
            StepRule::OneOverS => 1.0 / s as f64,
            StepRule::OneOverSPlusOne => 1.0 / (s as f64 + 1.0),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepRule::OneOverS => "one_over_s",
            StepRule::OneOverSPlusOne => "one_over_s_plus_one",
        }
    }
}

impl FromStr for StepRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_over_s" => Ok(StepRule::OneOverS),
            "one_over_s_plus_one" => Ok(StepRule::OneOverSPlusOne),
            other => Err(Error::UnknownRule(other.into())),
        }
    }
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `own + δ(target − own) + (1/κ)Σⱼ aᵢⱼ(neighborⱼ − own)`, elementwise.
pub fn mix_and_relax(
    own: &[f64],
    target: &[f64],
    neighbors: &[(f64, &[f64])],
    delta: f64,
    kappa: f64,
) -> Vec<f64> {
    let mut out: Vec<f64> = own
        .iter()
        .zip(target)
        .map(|(o, t)| o + delta * (t - o))
        .collect();
    for (weight, values) in neighbors {
        let w = weight / kappa;
        for ((dst, o), v) in out.iter_mut().zip(own).zip(values.iter()) {
            *dst += w * (v - o);
        }
    }
    out
}

/// What an agent shares with its neighbors after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFields {
    /// `x_{i,s}(t_n)` in the augmented space.
    pub x: GridField,
    /// `F_{i,s}(t_n)`.
    pub f: GridField,
    /// `l_{i,s}(t_n)`.
    pub l: GridField,
    /// Drift and running cost at every `(t_n, c_j)`.
    pub point: PdeFields,
    /// Value coefficients, only when coefficient sharing is switched on.
    pub theta: Option<DMatrix<f64>>,
}

impl AgentFields {
    fn zeros(state_dim: usize, nodes: usize, centers: usize) -> Self {
        AgentFields {
            x: GridField::zeros(state_dim, nodes),
            f: GridField::zeros(state_dim, nodes),
            l: GridField::zeros(1, nodes),
            point: PdeFields::zeros(nodes, state_dim, centers),
            theta: None,
        }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.f.is_finite()
            && self.l.is_finite()
            && self.point.source.iter().all(|v| v.is_finite())
            && self
                .point
                .advection
                .iter()
                .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

impl PayloadSize for AgentFields {
    fn size_bytes(&self) -> usize {
        let reals = self.x.as_matrix().len()
            + self.f.as_matrix().len()
            + self.l.as_matrix().len()
            + self.point.source.len()
            + self.point.advection.iter().map(|m| m.len()).sum::<usize>()
            + self.theta.as_ref().map_or(0, |t| t.len());
        reals * core::mem::size_of::<f64>()
    }
}

/// Agent `i`'s state after round `s` of sweep `k`: the shared fields and the
/// value function `V^{k+1}_{i,s}` solved from them.
#[derive(Debug, Clone)]
pub struct AgentIterate {
    pub agent: usize,
    pub k: usize,
    pub s: usize,
    pub fields: Arc<AgentFields>,
    pub value: ValueApprox,
}

/// Per-agent quantities at the collocation centers that never change.
#[derive(Debug, Clone)]
struct AgentCache {
    /// `½cⱼᵀQ̃ᵢcⱼ`.
    state_cost: Vec<f64>,
    /// `fᵢ(čⱼ)` with `čⱼ` block `i` of center `j`.
    drift: Vec<DVector<f64>>,
    /// `gᵢ(čⱼ)`.
    input: Vec<DMatrix<f64>>,
}

/// Fault injection: at the start of round `round` of sweep `sweep`, agent
/// `reader` asks the bus for `owner`'s payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub sweep: usize,
    pub round: usize,
    pub reader: usize,
    pub owner: usize,
}

/// Budgets and switches of a distributed run.
#[derive(Debug, Clone, PartialEq)]
pub struct DvaSettings {
    /// Outer sweeps `K`.
    pub sweeps: usize,
    /// Rounds per sweep `S`.
    pub rounds: usize,
    pub schedule: StepRule,
    /// Adds the value coefficients to every payload.
    pub share_coefficients: bool,
    pub probe: Option<Probe>,
}

impl Default for DvaSettings {
    fn default() -> Self {
        DvaSettings {
            sweeps: 5,
            rounds: 50,
            schedule: StepRule::OneOverS,
            share_coefficients: false,
            probe: None,
        }
    }
}

/// One row of the run log: agent `agent` after round `s` of sweep `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub k: usize,
    pub s: usize,
    pub agent: usize,
    /// `maxₙ ‖x_{i,s}(t_n)‖`.
    pub x_norm: f64,
    pub f_norm: f64,
    pub l_norm: f64,
    /// `maxₙ |V_{i,s}(t_n, x_{i,s}(t_n))|`.
    pub v_norm: f64,
    /// `max_{i,j} maxₙ ‖x_i(t_n) − x_j(t_n)‖` over all agents in this round.
    pub consensus_dev: f64,
    /// `maxₙ ‖x_{i,s}(t_n) − x(t_n)‖/(1 + ‖x(t_n)‖)` against the reference, if any.
    pub ref_dev: Option<f64>,
}

/// Worst relative deviations of the final iterates from a centralized run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviations {
    pub x: f64,
    pub f: f64,
    pub l: f64,
    pub v: f64,
    /// `maxₙ ‖U(t_n) − u(t_n, x(t_n))‖/(1 + ‖u‖)`.
    pub u: f64,
}

/// The stacked controller `U(t_n)` and each agent's contribution `ūᵢ(t_n)`.
#[derive(Debug, Clone)]
pub struct ExtractedController {
    pub stacked: GridField,
    pub per_agent: Vec<GridField>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<RoundRecord>,
    pub mixing: MixingConfig,
    pub access_log: AccessLog,
    pub access_violations: usize,
    /// Total bytes posted to the bus.
    pub bytes_posted: usize,
    pub final_deviations: Option<Deviations>,
}

impl RunReport {
    /// Consensus deviation after round `s` of sweep `k`.
    pub fn consensus_dev(&self, k: usize, s: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.k == k && r.s == s)
            .map(|r| r.consensus_dev)
    }
}

#[derive(Debug, Clone)]
pub struct DvaOutcome {
    pub report: RunReport,
    pub iterates: Vec<AgentIterate>,
    pub controller: ExtractedController,
    /// States reached by applying `U` open loop from the true initial state.
    pub open_loop_states: GridField,
    /// Performance index of that open-loop rollout.
    pub cost: f64,
}

/// Everything fixed across a distributed run.
#[derive(Debug, Clone)]
pub struct DistributedProblem {
    sys: GlobalSystem,
    graph: Graph,
    colloc: Collocation,
    grid: TimeGrid,
    mixing: MixingConfig,
    caches: Vec<AgentCache>,
}

impl DistributedProblem {
    /// Requires a connected graph, an admissible `κ`, a block-diagonal `R`, cost
    /// couplings only along edges, and a basis on the augmented state space.
    pub fn new(
        sys: GlobalSystem,
        graph: Graph,
        colloc: Collocation,
        grid: TimeGrid,
        kappa: f64,
    ) -> Result<Self> {
        if graph.agent_count() != sys.agents() {
            return Err(Error::dims(
                "graph agent count",
                sys.agents(),
                graph.agent_count(),
            ));
        }
        if colloc.dim() != sys.state_dim() {
            return Err(Error::BasisMismatch);
        }
        let mixing = validate_kappa(&graph, kappa)?;
        // Re-validating against the graph rejects couplings between non-neighbors.
        CostSpec::new(
            sys.cost().q().clone(),
            sys.cost().r().clone(),
            sys.agents(),
            Some(&graph),
        )?;
        if !sys.cost().is_r_block_diagonal() {
            return Err(Error::RNotBlockDiagonal);
        }
        let n = sys.cost().state_dim();
        let centers = colloc.basis().centers();
        let caches = (0..sys.agents())
            .map(|i| {
                let model = &sys.models()[i];
                let mut cache = AgentCache {
                    state_cost: Vec::with_capacity(colloc.len()),
                    drift: Vec::with_capacity(colloc.len()),
                    input: Vec::with_capacity(colloc.len()),
                };
                for j in 0..colloc.len() {
                    let c = centers.column(j);
                    let own = &c.as_slice()[i * n..(i + 1) * n];
                    cache
                        .state_cost
                        .push(0.5 * quadratic_form(sys.cost().q_slice(i), c.as_slice()));
                    cache.drift.push(model.drift(own));
                    cache.input.push(model.input_map(own));
                }
                cache
            })
            .collect();
        Ok(DistributedProblem {
            sys,
            graph,
            colloc,
            grid,
            mixing,
            caches,
        })
    }

    pub fn system(&self) -> &GlobalSystem {
        &self.sys
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn collocation(&self) -> &Collocation {
        &self.colloc
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn mixing(&self) -> MixingConfig {
        self.mixing
    }

    fn agents(&self) -> usize {
        self.sys.agents()
    }

    fn n(&self) -> usize {
        self.sys.cost().state_dim()
    }

    fn m(&self) -> usize {
        self.sys.cost().control_dim()
    }

    /// Block `i` of `u_{i,s} = −R̄ᵢgᵢ(x̌)ᵀ∇V`: `−Rᵢ⁻¹gᵢ(x̌)ᵀ ∂V/∂xᵢ` with `x̌` block `i`
    /// of the augmented estimate `x`.
    fn own_control(&self, i: usize, theta: Option<&[f64]>, x: &[f64]) -> Result<DVector<f64>> {
        let Some(theta) = theta else {
            return Ok(DVector::zeros(self.m()));
        };
        let n = self.n();
        let grad = self.colloc.basis().gradient(theta, x);
        let g = self.sys.models()[i].input_map(&x[i * n..(i + 1) * n]);
        let r_inv = self.sys.cost().r_block_inverse(i)?;
        Ok(-(r_inv * (g.transpose() * grad.rows(i * n, n))))
    }

    /// `u_{i,s}(t, x) ∈ R^{mN}`: zero outside block `i`.
    pub fn local_control(&self, i: usize, theta: &[f64], x: &[f64]) -> Result<DVector<f64>> {
        if i >= self.agents() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.agents(),
            });
        }
        if x.len() != self.sys.state_dim() {
            return Err(Error::dims(
                "augmented state",
                self.sys.state_dim(),
                x.len(),
            ));
        }
        let m = self.m();
        let mut u = DVector::zeros(self.sys.control_dim());
        u.rows_mut(i * m, m)
            .copy_from(&self.own_control(i, Some(theta), x)?);
        Ok(u)
    }

    /// `N(fᵢ(x̌) + gᵢ(x̌)uᵢ)` in block `i` of an augmented vector.
    fn lifted_velocity(&self, i: usize, x: &[f64], ui: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let agents = self.agents() as f64;
        let model = &self.sys.models()[i];
        let own = &x[i * n..(i + 1) * n];
        let mut out = DVector::zeros(self.sys.state_dim());
        out.rows_mut(i * n, n)
            .copy_from(&((model.drift(own) + model.input_map(own) * ui) * agents));
        out
    }

    /// `½uᵀR̃ᵢu` for `u` supported on block `i` only.
    fn own_control_cost(&self, i: usize, ui: &DVector<f64>) -> f64 {
        let m = self.m();
        let rii = self.sys.cost().r().view((i * m, i * m), (m, m));
        0.5 * self.agents() as f64 * ui.dot(&(rii * ui))
    }

    /// One bulk-synchronous update of agent `i` from round `s − 1` to `s`.
    ///
    /// `theta_prev` is `V^k_{i,s−1}` and `theta_now` is `V^k_{i,s}`, both from the
    /// previous sweep; `None` stands for the zero value function.
    #[allow(clippy::too_many_arguments)]
    pub fn round_update(
        &self,
        i: usize,
        own: &AgentFields,
        neighbors: &[(usize, Arc<AgentFields>)],
        theta_prev: Option<&DMatrix<f64>>,
        theta_now: Option<&DMatrix<f64>>,
        delta: f64,
        s: usize,
    ) -> Result<AgentFields> {
        let nodes = self.grid.len();
        let dim = self.sys.state_dim();
        let kappa = self.mixing.kappa;
        let n = self.n();
        let agents = self.agents() as f64;
        let weights: Vec<f64> = neighbors
            .iter()
            .map(|(j, _)| self.graph.weight(i, *j))
            .collect();
        let row = |theta: Option<&DMatrix<f64>>, t: usize| -> Option<Vec<f64>> {
            theta.map(|m| m.row(t).iter().copied().collect())
        };

        // Trajectory target: 𝔵ᵢ₀ + ∫₀ᵗ 𝔣ᵢ + 𝔤ᵢu_{i,s−1} along the previous estimate.
        let mut integrand = GridField::zeros(dim, nodes);
        for t in 0..nodes {
            let x = own.x.node(t);
            let coeffs = row(theta_prev, t);
            let ui = self.own_control(i, coeffs.as_deref(), x)?;
            integrand.set(t, self.lifted_velocity(i, x, &ui).as_slice());
        }
        let mut x_target = cumulative_trapezoid(&integrand, &self.grid).into_matrix();
        let x0 = self.sys.models()[i].x0();
        for t in 0..nodes {
            for d in 0..n {
                x_target[(i * n + d, t)] += agents * x0[d];
            }
        }
        let x_new = mix_and_relax(
            own.x.as_matrix().as_slice(),
            x_target.as_slice(),
            &self.pairs(&weights, neighbors, |p| p.x.as_matrix().as_slice()),
            delta,
            kappa,
        );
        let x_new = GridField::from_matrix(DMatrix::from_vec(dim, nodes, x_new));

        // Drift and cost targets along the new estimate, with u from V^k_{i,s}.
        let mut f_target = GridField::zeros(dim, nodes);
        let mut l_target = vec![0.0; nodes];
        for (t, l) in l_target.iter_mut().enumerate() {
            let x = x_new.node(t);
            let coeffs = row(theta_now, t);
            let ui = self.own_control(i, coeffs.as_deref(), x)?;
            f_target.set(t, self.lifted_velocity(i, x, &ui).as_slice());
            *l =
                0.5 * quadratic_form(self.sys.cost().q_slice(i), x) + self.own_control_cost(i, &ui);
        }
        let f_new = mix_and_relax(
            own.f.as_matrix().as_slice(),
            f_target.as_matrix().as_slice(),
            &self.pairs(&weights, neighbors, |p| p.f.as_matrix().as_slice()),
            delta,
            kappa,
        );
        let l_new = mix_and_relax(
            own.l.as_matrix().as_slice(),
            &l_target,
            &self.pairs(&weights, neighbors, |p| p.l.as_matrix().as_slice()),
            delta,
            kappa,
        );

        // The same recursion on the fields at the collocation centers.
        let point_target = self.point_targets(i, theta_now)?;
        let mut point = PdeFields::zeros(0, dim, self.colloc.len());
        for t in 0..nodes {
            let mixed = mix_and_relax(
                own.point.advection[t].as_slice(),
                point_target.advection[t].as_slice(),
                &self.pairs(&weights, neighbors, |p| p.point.advection[t].as_slice()),
                delta,
                kappa,
            );
            point
                .advection
                .push(DMatrix::from_vec(dim, self.colloc.len(), mixed));
        }
        point.source = DMatrix::from_vec(
            nodes,
            self.colloc.len(),
            mix_and_relax(
                own.point.source.as_slice(),
                point_target.source.as_slice(),
                &self.pairs(&weights, neighbors, |p| p.point.source.as_slice()),
                delta,
                kappa,
            ),
        );

        let fields = AgentFields {
            x: x_new,
            f: GridField::from_matrix(DMatrix::from_vec(dim, nodes, f_new)),
            l: GridField::from_scalars(&l_new),
            point,
            theta: None,
        };
        if !fields.is_finite() {
            return Err(Error::NonFiniteField { agent: i, round: s });
        }
        Ok(fields)
    }

    fn pairs<'a, F>(
        &self,
        weights: &[f64],
        neighbors: &'a [(usize, Arc<AgentFields>)],
        pick: F,
    ) -> Vec<(f64, &'a [f64])>
    where
        F: Fn(&'a AgentFields) -> &'a [f64],
    {
        weights
            .iter()
            .zip(neighbors)
            .map(|(w, (_, p))| (*w, pick(p.as_ref())))
            .collect()
    }

    /// `𝔣ᵢ + 𝔤ᵢuᵢ` and `½cᵀQ̃ᵢc + ½uᵀR̃ᵢu` at every `(t_n, c_j)`.
    fn point_targets(&self, i: usize, theta: Option<&DMatrix<f64>>) -> Result<PdeFields> {
        let nodes = self.grid.len();
        let m_centers = self.colloc.len();
        let n = self.n();
        let agents = self.agents() as f64;
        let cache = &self.caches[i];
        let r_inv = self.sys.cost().r_block_inverse(i)?;
        let mut out = PdeFields::zeros(nodes, self.sys.state_dim(), m_centers);
        for t in 0..nodes {
            let grads = theta.map(|th| {
                let coeffs: Vec<f64> = th.row(t).iter().copied().collect();
                self.colloc.gradients_at_centers(&coeffs)
            });
            for j in 0..m_centers {
                let g = &cache.input[j];
                let ui = match &grads {
                    Some(gr) => -(r_inv * (g.transpose() * gr.view((i * n, j), (n, 1)))),
                    None => DMatrix::zeros(self.m(), 1),
                };
                let ui = ui.column(0).into_owned();
                let v = (&cache.drift[j] + g * &ui) * agents;
                out.advection[t].view_mut((i * n, j), (n, 1)).copy_from(&v);
                out.source[(t, j)] = cache.state_cost[j] + self.own_control_cost(i, &ui);
            }
        }
        Ok(out)
    }

    /// `V^{k+1}_{i,s}` from the agent's point fields.
    pub fn local_pde_solve(&self, fields: &AgentFields) -> Result<ValueApprox> {
        solve_linear_pde(&self.colloc, &fields.point, &self.grid)
    }

    /// `ūᵢ(t_n)` from each agent's final estimate and value; `U` is their sum.
    pub fn extract_controller(&self, iterates: &[AgentIterate]) -> Result<ExtractedController> {
        if iterates.len() != self.agents() {
            return Err(Error::dims("agent iterates", self.agents(), iterates.len()));
        }
        let nodes = self.grid.len();
        let m = self.m();
        let mut stacked = GridField::zeros(self.sys.control_dim(), nodes);
        let mut per_agent = Vec::with_capacity(iterates.len());
        for it in iterates {
            let mut ui = GridField::zeros(self.sys.control_dim(), nodes);
            for t in 0..nodes {
                let coeffs = it.value.node_coefficients(t);
                let u = self.own_control(it.agent, Some(&coeffs), it.fields.x.node(t))?;
                ui.node_mut(t)[it.agent * m..(it.agent + 1) * m].copy_from_slice(u.as_slice());
                stacked.node_mut(t)[it.agent * m..(it.agent + 1) * m].copy_from_slice(u.as_slice());
            }
            per_agent.push(ui);
        }
        Ok(ExtractedController { stacked, per_agent })
    }

    /// Applies `U` (linear between nodes) open loop to the true system and
    /// returns the states and the performance index.
    pub fn open_loop_cost(&self, controls: &GridField) -> Result<(GridField, f64)> {
        if controls.len() != self.grid.len() || controls.dim() != self.sys.control_dim() {
            return Err(Error::dims(
                "open-loop control samples",
                self.grid.len() * self.sys.control_dim(),
                controls.len() * controls.dim(),
            ));
        }
        let grid = &self.grid;
        let controller = |t: f64, _: &DVector<f64>| -> DVector<f64> {
            let (n, frac) = grid.locate(t);
            let a = controls.at(n);
            if n + 1 < grid.len() {
                &a + (controls.at(n + 1) - &a) * frac
            } else {
                a
            }
        };
        let states = rollout(self.sys.models(), controller, grid)?;
        let cost = self.sys.cost().performance_index(&states, controls, grid)?;
        Ok((states, cost))
    }

    /// Worst deviations of the final iterates and `U` from a centralized run.
    pub fn deviations(
        &self,
        iterates: &[AgentIterate],
        controller: &ExtractedController,
        reference: &CentralizedRun,
    ) -> Deviations {
        let rel = |a: &[f64], b: &[f64]| -> f64 {
            let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            let norm: f64 = b.iter().map(|q| q * q).sum();
            ComplexField::sqrt(diff) / (1.0 + ComplexField::sqrt(norm))
        };
        let mut dev = Deviations {
            x: 0.0,
            f: 0.0,
            l: 0.0,
            v: 0.0,
            u: 0.0,
        };
        for it in iterates {
            for t in 0..self.grid.len() {
                let x = it.fields.x.node(t);
                dev.x = dev.x.max(rel(x, reference.states.node(t)));
                dev.f = dev
                    .f
                    .max(rel(it.fields.f.node(t), reference.velocity.node(t)));
                dev.l = dev
                    .l
                    .max(rel(it.fields.l.node(t), reference.running_cost.node(t)));
                let v = it.value.value(t, x);
                dev.v = dev.v.max(rel(&[v], reference.value_along.node(t)));
            }
        }
        for t in 0..self.grid.len() {
            dev.u = dev
                .u
                .max(rel(controller.stacked.node(t), reference.controls.node(t)));
        }
        dev
    }

    /// Runs `K` sweeps of `S` rounds over the message bus.
    pub fn run(
        &self,
        settings: &DvaSettings,
        reference: Option<&CentralizedRun>,
    ) -> Result<DvaOutcome> {
        if settings.sweeps == 0 {
            return Err(Error::InvalidParameter {
                name: "K",
                reason: "at least one sweep is required",
            });
        }
        if settings.rounds == 0 {
            return Err(Error::InvalidParameter {
                name: "S",
                reason: "at least one round is required",
            });
        }
        let agents = self.agents();
        let (dim, nodes, centers) = (self.sys.state_dim(), self.grid.len(), self.colloc.len());
        let rounds = settings.rounds;
        let mut bus: RoundBus<AgentFields> = RoundBus::new(self.graph.clone());
        let mut records = Vec::with_capacity(settings.sweeps * rounds * agents);
        // previous[i][s] holds Θ^k_{i,s}; index 0 is never filled.
        let mut previous: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; rounds + 1]; agents];
        let mut latest: Vec<Option<AgentIterate>> = vec![None; agents];

        for k in 0..settings.sweeps {
            let mut current: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; rounds + 1]; agents];
            for i in 0..agents {
                bus.post(i, AgentFields::zeros(dim, nodes, centers))?;
            }
            bus.advance()?;
            for s in 1..=rounds {
                if let Some(p) = settings.probe.filter(|p| p.sweep == k && p.round == s) {
                    bus.request(p.reader, p.owner)?;
                }
                let delta = settings.schedule.delta(s)?;
                let mut round: Vec<AgentIterate> = Vec::with_capacity(agents);
                for (i, history) in previous.iter().enumerate() {
                    let (own, neighbors) = bus.collect(i)?;
                    let mut fields = self.round_update(
                        i,
                        &own,
                        &neighbors,
                        history[s - 1].as_ref(),
                        history[s].as_ref(),
                        delta,
                        s,
                    )?;
                    let value = self.local_pde_solve(&fields)?;
                    if settings.share_coefficients {
                        fields.theta = Some(value.coefficients().clone());
                    }
                    round.push(AgentIterate {
                        agent: i,
                        k,
                        s,
                        fields: Arc::new(fields),
                        value,
                    });
                }
                let consensus = consensus_deviation(&round);
                for it in &round {
                    records.push(self.record(it, consensus, reference));
                    current[it.agent][s] = Some(it.value.coefficients().clone());
                }
                log::debug!("sweep {k} round {s}: consensus deviation {consensus:.3e}");
                for it in round {
                    bus.post(it.agent, (*it.fields).clone())?;
                    let slot = it.agent;
                    latest[slot] = Some(it);
                }
                bus.advance()?;
            }
            previous = current;
        }

        let iterates: Vec<AgentIterate> = latest
            .into_iter()
            .map(|it| it.expect("every agent ran at least one round"))
            .collect();
        let controller = self.extract_controller(&iterates)?;
        let (open_loop_states, cost) = self.open_loop_cost(&controller.stacked)?;
        let final_deviations = reference.map(|r| self.deviations(&iterates, &controller, r));
        let access_log = bus.log().clone();
        let report = RunReport {
            records,
            mixing: self.mixing,
            access_violations: access_log.violations(&self.graph).len(),
            access_log,
            bytes_posted: bus.round_bytes().iter().sum(),
            final_deviations,
        };
        Ok(DvaOutcome {
            report,
            iterates,
            controller,
            open_loop_states,
            cost,
        })
    }

    fn record(
        &self,
        it: &AgentIterate,
        consensus_dev: f64,
        reference: Option<&CentralizedRun>,
    ) -> RoundRecord {
        let fields = &it.fields;
        let max_norm = |g: &GridField| g.node_norms().into_iter().fold(0.0, f64::max);
        let v_norm = (0..self.grid.len())
            .map(|t| it.value.value(t, fields.x.node(t)).abs())
            .fold(0.0, f64::max);
        let ref_dev = reference.map(|r| {
            (0..self.grid.len())
                .map(|t| {
                    let x = fields.x.at(t);
                    let xr = r.states.at(t);
                    (x - &xr).norm() / (1.0 + xr.norm())
                })
                .fold(0.0, f64::max)
        });
        RoundRecord {
            k: it.k,
            s: it.s,
            agent: it.agent,
            x_norm: max_norm(&fields.x),
            f_norm: max_norm(&fields.f),
            l_norm: max_norm(&fields.l),
            v_norm,
            consensus_dev,
            ref_dev,
        }
    }
}

/// `max_{i,j} maxₙ ‖x_i(t_n) − x_j(t_n)‖`.
pub fn consensus_deviation(iterates: &[AgentIterate]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, ia) in iterates.iter().enumerate() {
        for ib in &iterates[a + 1..] {
            let d = (ia.fields.x.as_matrix() - ib.fields.x.as_matrix())
                .column_iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AgentModel;
    use crate::graph::mixing_factor;
    use crate::rbf::{halton_points, Bounds, RbfBasis};

    fn integrators(x0: &[f64]) -> Vec<AgentModel> {
        x0.iter()
            .map(|x| {
                AgentModel::linear(
                    DMatrix::zeros(1, 1),
                    DMatrix::identity(1, 1),
                    DVector::from_vec(vec![*x]),
                )
                .unwrap()
            })
            .collect()
    }

    fn small_problem(x0: &[f64], q: DMatrix<f64>, graph: Graph, kappa: f64) -> DistributedProblem {
        let agents = x0.len();
        let cost =
            CostSpec::new(q, DMatrix::identity(agents, agents), agents, Some(&graph)).unwrap();
        let sys = GlobalSystem::new(integrators(x0), cost).unwrap();
        let bounds = Bounds::new(
            DVector::from_element(agents, -1.5),
            DVector::from_element(agents, 1.5),
        )
        .unwrap();
        let basis = Arc::new(RbfBasis::new(halton_points(&bounds, 20, 0), 1.0).unwrap());
        let grid = TimeGrid::new(1.0, 11).unwrap();
        DistributedProblem::new(sys, graph, Collocation::new(basis), grid, kappa).unwrap()
    }

    fn pair() -> DistributedProblem {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        small_problem(&[1.0, -0.5], q, Graph::new(2, &[(0, 1, 1.0)]).unwrap(), 1.5)
    }

    #[test]
    fn step_rules() {
        assert_eq!(StepRule::OneOverS.delta(1).unwrap(), 1.0);
        assert_eq!(StepRule::OneOverS.delta(4).unwrap(), 0.25);
        assert_eq!(StepRule::OneOverSPlusOne.delta(1).unwrap(), 0.5);
        assert!(StepRule::OneOverS.delta(0).is_err());
        assert_eq!(
            "one_over_s_plus_one".parse::<StepRule>().unwrap(),
            StepRule::OneOverSPlusOne
        );
        assert!(matches!(
            "halving".parse::<StepRule>(),
            Err(Error::UnknownRule(_))
        ));
        let harmonic: f64 = (1..=10_000)
            .map(|s| StepRule::OneOverS.delta(s).unwrap())
            .sum();
        let squares: f64 = (1..=10_000)
            .map(|s| StepRule::OneOverS.delta(s).unwrap().powi(2))
            .sum();
        assert!(harmonic > 9.0);
        assert!(squares < 1.645);
    }

    #[test]
    fn first_round_with_zero_value_is_the_lifted_initial_state() {
        let p = pair();
        let zero = AgentFields::zeros(2, 11, 20);
        let nbr = vec![(1, Arc::new(zero.clone()))];
        let out = p.round_update(0, &zero, &nbr, None, None, 1.0, 1).unwrap();
        for t in 0..11 {
            assert_eq!(out.x.node(t), &[2.0, 0.0]);
            assert_eq!(out.f.node(t), &[0.0, 0.0]);
        }
        // ½xᵀQ̃₀x with x = (2, 0): Q̃₀ = [[4, −4], [0, 0]].
        assert_eq!(out.l.scalar(0), 8.0);
    }

    #[test]
    fn identical_neighbors_leave_only_relaxation() {
        let own = vec![1.0, 2.0, 3.0];
        let target = vec![0.0, 0.0, 6.0];
        let out = mix_and_relax(&own, &target, &[(1.0, &own[..]), (2.0, &own[..])], 0.5, 3.0);
        assert_eq!(out, vec![0.5, 1.0, 4.5]);
    }

    #[test]
    fn mixing_cancels_under_summation() {
        let g = Graph::new(4, &[(0, 1, 1.0), (1, 2, 0.5), (2, 3, 2.0), (0, 3, 1.0)]).unwrap();
        let values: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..5).map(|d| ((i * 7 + d * 3) as f64).sin()).collect())
            .collect();
        let mut total = [0.0; 5];
        for i in 0..4 {
            let nbrs: Vec<(f64, &[f64])> = g
                .neighbors(i)
                .unwrap()
                .iter()
                .map(|j| (g.weight(i, *j), values[*j].as_slice()))
                .collect();
            // Zero relaxation isolates the mixing term.
            let out = mix_and_relax(&values[i], &values[i], &nbrs, 0.0, 2.7);
            for d in 0..5 {
                total[d] += out[d] - values[i][d];
            }
        }
        assert!(total.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pure_mixing_contracts_by_rho() {
        let g = Graph::new(5, &[(0, 1, 1.0), (1, 2, 1.0), (1, 4, 1.0), (3, 4, 1.0)]).unwrap();
        let kappa = 2.5;
        let rho = mixing_factor(&g, kappa).unwrap();
        let mut x: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![(i as f64 * 1.3).cos(), i as f64])
            .collect();
        let deviation = |x: &[Vec<f64>]| -> f64 {
            let mut sq = 0.0;
            for d in 0..2 {
                let mean = x.iter().map(|v| v[d]).sum::<f64>() / 5.0;
                sq += x.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>();
            }
            ComplexField::sqrt(sq)
        };
        for _ in 0..30 {
            let before = deviation(&x);
            let next: Vec<Vec<f64>> = (0..5)
                .map(|i| {
                    let nbrs: Vec<(f64, &[f64])> = g
                        .neighbors(i)
                        .unwrap()
                        .iter()
                        .map(|j| (g.weight(i, *j), x[*j].as_slice()))
                        .collect();
                    mix_and_relax(&x[i], &x[i], &nbrs, 0.0, kappa)
                })
                .collect();
            x = next;
            assert!(deviation(&x) <= (rho + 1e-9) * before);
        }
    }

    #[test]
    fn average_gap_shrinks_by_one_minus_delta() {
        let g = Graph::new(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let targets = [[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]];
        let mean_target: Vec<f64> = (0..2)
            .map(|d| targets.iter().map(|t| t[d]).sum::<f64>() / 3.0)
            .collect();
        let mut x: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 3];
        let mut central = vec![0.4, -0.7];
        let mean = |x: &[Vec<f64>]| -> Vec<f64> {
            (0..2)
                .map(|d| x.iter().map(|v| v[d]).sum::<f64>() / 3.0)
                .collect()
        };
        let mut gap: Vec<f64> = mean(&x).iter().zip(&central).map(|(a, b)| a - b).collect();
        for s in 1..=20 {
            let delta = StepRule::OneOverSPlusOne.delta(s).unwrap();
            let next: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    let nbrs: Vec<(f64, &[f64])> = g
                        .neighbors(i)
                        .unwrap()
                        .iter()
                        .map(|j| (1.0, x[*j].as_slice()))
                        .collect();
                    mix_and_relax(&x[i], &targets[i], &nbrs, delta, 2.0)
                })
                .collect();
            x = next;
            central = mix_and_relax(&central, &mean_target, &[], delta, 2.0);
            let new_gap: Vec<f64> = mean(&x).iter().zip(&central).map(|(a, b)| a - b).collect();
            for d in 0..2 {
                assert!((new_gap[d] - (1.0 - delta) * gap[d]).abs() < 1e-12);
            }
            gap = new_gap;
        }
    }

    #[test]
    fn local_control_is_block_sparse() {
        let p = pair();
        let theta: Vec<f64> = (0..20).map(|j| (j as f64).sin()).collect();
        let u = p.local_control(1, &theta, &[0.3, -0.2]).unwrap();
        assert_eq!(u[0], 0.0);
        let grad = p.collocation().basis().gradient(&theta, &[0.3, -0.2]);
        assert!((u[1] + grad[1]).abs() < 1e-15);
    }

    #[test]
    fn unicycle_control_uses_transposed_map() {
        let graph = Graph::new(2, &[(0, 1, 1.0)]).unwrap();
        let cost = CostSpec::new(
            DMatrix::identity(6, 6),
            DMatrix::identity(4, 4) * 0.5,
            2,
            Some(&graph),
        )
        .unwrap();
        let sys = GlobalSystem::new(
            vec![
                AgentModel::unicycle([0.0, 0.0, 0.2]),
                AgentModel::unicycle([1.0, 1.0, 0.7]),
            ],
            cost,
        )
        .unwrap();
        let centers = DMatrix::from_fn(6, 8, |r, c| ((r * 8 + c) as f64 * 0.77).sin());
        let basis = Arc::new(RbfBasis::new(centers, 1.0).unwrap());
        let p = DistributedProblem::new(
            sys,
            graph,
            Collocation::new(basis.clone()),
            TimeGrid::new(1.0, 3).unwrap(),
            1.5,
        )
        .unwrap();
        let theta: Vec<f64> = (0..8).map(|j| (j as f64 * 0.4).cos()).collect();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let u = p.local_control(1, &theta, &x).unwrap();
        let grad = basis.gradient(&theta, &x);
        let th = 0.6f64;
        let v = ComplexField::cos(th) * grad[3] + ComplexField::sin(th) * grad[4];
        assert_eq!(&u.as_slice()[..2], &[0.0, 0.0]);
        assert!((u[2] + 2.0 * v).abs() < 1e-14);
        assert!((u[3] + 2.0 * grad[5]).abs() < 1e-14);
    }

    #[test]
    fn zero_value_gives_zero_controller() {
        let p = pair();
        let grid = *p.grid();
        let zero = AgentFields::zeros(2, 11, 20);
        let iterates: Vec<AgentIterate> = (0..2)
            .map(|i| AgentIterate {
                agent: i,
                k: 0,
                s: 1,
                fields: Arc::new(zero.clone()),
                value: ValueApprox::zero(p.collocation().basis().clone(), grid),
            })
            .collect();
        let c = p.extract_controller(&iterates).unwrap();
        assert_eq!(c.stacked.sup_norm(), 0.0);
    }

    #[test]
    fn zero_fields_give_zero_value() {
        let p = pair();
        let v = p.local_pde_solve(&AgentFields::zeros(2, 11, 20)).unwrap();
        assert_eq!(v.coefficients().amax(), 0.0);
    }

    #[test]
    fn run_is_deterministic_and_consensus_shrinks() {
        let p = pair();
        let settings = DvaSettings {
            sweeps: 2,
            rounds: 40,
            ..DvaSettings::default()
        };
        let a = p.run(&settings, None).unwrap();
        let b = p.run(&settings, None).unwrap();
        assert_eq!(a.report.records, b.report.records);
        assert_eq!(a.controller.stacked, b.controller.stacked);
        assert_eq!(a.report.records.len(), 2 * 40 * 2);
        assert_eq!(a.report.access_violations, 0);
        for k in 0..2 {
            let first = a.report.consensus_dev(k, 1).unwrap();
            let last = a.report.consensus_dev(k, 40).unwrap();
            assert!(last < 0.05 * first, "{first} {last}");
        }
        assert!(a.cost.is_finite());
        for per in &a.controller.per_agent {
            assert_eq!(per.dim(), 2);
        }
        assert_eq!(a.controller.per_agent[0].as_matrix().row(1).amax(), 0.0);
        assert_eq!(a.controller.per_agent[1].as_matrix().row(0).amax(), 0.0);
    }

    #[test]
    fn probe_outside_neighborhood_aborts() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1.0]));
        let p = small_problem(
            &[1.0, 0.0, -1.0],
            q,
            Graph::new(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap(),
            2.0,
        );
        let settings = DvaSettings {
            sweeps: 1,
            rounds: 3,
            probe: Some(Probe {
                sweep: 0,
                round: 2,
                reader: 0,
                owner: 2,
            }),
            ..DvaSettings::default()
        };
        assert!(matches!(
            p.run(&settings, None),
            Err(Error::InformationStructureViolation {
                reader: 0,
                owner: 2,
                ..
            })
        ));
        let allowed = DvaSettings {
            probe: Some(Probe {
                sweep: 0,
                round: 2,
                reader: 0,
                owner: 1,
            }),
            ..settings
        };
        assert!(p.run(&allowed, None).is_ok());
    }

    #[test]
    fn relabeling_agents_permutes_the_controller() {
        let q = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let x0 = [0.8, -0.3, 0.5];
        let path = Graph::new(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        // Reversal maps agent i to 2 − i; Q is persymmetric so only x0 moves.
        let reversed_x0 = [0.5, -0.3, 0.8];
        let settings = DvaSettings {
            sweeps: 2,
            rounds: 10,
            ..DvaSettings::default()
        };
        let bounds = Bounds::new(
            DVector::from_element(3, -1.5),
            DVector::from_element(3, 1.5),
        )
        .unwrap();
        let centers = halton_points(&bounds, 20, 0);
        let mut flipped = centers.clone();
        for j in 0..20 {
            flipped[(0, j)] = centers[(2, j)];
            flipped[(2, j)] = centers[(0, j)];
        }
        let build = |x0: &[f64], centers: DMatrix<f64>| {
            let cost = CostSpec::new(q.clone(), DMatrix::identity(3, 3), 3, Some(&path)).unwrap();
            let sys = GlobalSystem::new(integrators(x0), cost).unwrap();
            let basis = Arc::new(RbfBasis::new(centers, 1.0).unwrap());
            DistributedProblem::new(
                sys,
                path.clone(),
                Collocation::new(basis),
                TimeGrid::new(1.0, 6).unwrap(),
                2.0,
            )
            .unwrap()
        };
        let a = build(&x0, centers).run(&settings, None).unwrap();
        let b = build(&reversed_x0, flipped).run(&settings, None).unwrap();
        for t in 0..6 {
            let ua = a.controller.stacked.node(t);
            let ub = b.controller.stacked.node(t);
            for i in 0..3 {
                assert!((ua[i] - ub[2 - i]).abs() < 1e-9, "{ua:?} {ub:?}");
            }
        }
    }
}
