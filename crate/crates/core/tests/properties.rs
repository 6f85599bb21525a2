//! Randomized checks of the structural identities.

use std::sync::Arc;

use approx::assert_relative_eq;
use distopt_core::cost::CostSpec;
use distopt_core::dva::mix_and_relax;
use distopt_core::dynamics::{lift_drift, lift_initial, lift_input, AgentModel, TimeGrid};
use distopt_core::graph::{mixing_factor, validate_kappa, Graph};
use distopt_core::hjb::GlobalSystem;
use distopt_core::rbf::{backward_step, halton_points, Bounds, Collocation, RbfBasis};
use distopt_core::{DMatrix, DVector, RowDVector};
use proptest::prelude::*;

/// A random connected graph: a random spanning tree plus extra edges.
fn connected_graph(max_agents: usize) -> impl Strategy<Value = Graph> {
    (2..=max_agents)
        .prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<u64>(), n - 1),
                proptest::collection::vec((0..n, 0..n, 0.25f64..2.0), 0..n),
                proptest::collection::vec(0.25f64..2.0, n - 1),
            )
        })
        .prop_map(|(n, parents, extra, tree_weights)| {
            let mut edges: Vec<(usize, usize, f64)> = Vec::new();
            for k in 1..n {
                let p = (parents[k - 1] % k as u64) as usize;
                edges.push((p, k, tree_weights[k - 1]));
            }
            for (a, b, w) in extra {
                let (a, b) = (a.min(b), a.max(b));
                if a != b && !edges.iter().any(|e| (e.0.min(e.1), e.0.max(e.1)) == (a, b)) {
                    edges.push((a, b, w));
                }
            }
            Graph::new(n, &edges).unwrap()
        })
}

fn spd(n: usize, seed: &[f64], shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
    &m * m.transpose() + DMatrix::identity(n, n) * shift
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_rows_and_columns_sum_to_zero(g in connected_graph(8)) {
        let l = g.laplacian();
        let scale = l.amax().max(1.0);
        for k in 0..g.agent_count() {
            prop_assert!(l.row(k).sum().abs() <= 4.0 * f64::EPSILON * scale);
            prop_assert!(l.column(k).sum().abs() <= 4.0 * f64::EPSILON * scale);
        }
    }

    #[test]
    fn mixing_factor_matches_dense_spectral_radius(g in connected_graph(8), frac in 0.05f64..3.0) {
        let lmax = g.laplacian_eigenvalues().into_iter().fold(0.0, f64::max);
        let kappa = frac * lmax;
        let n = g.agent_count();
        let y = DMatrix::from_element(n, n, 1.0 / n as f64);
        let literal = (g.mixing_matrix(kappa) - y).symmetric_eigenvalues().amax();
        let rho = mixing_factor(&g, kappa).unwrap();
        prop_assert!((rho - literal).abs() < 1e-9, "rho {rho} literal {literal}");
        if kappa > lmax / 2.0 * (1.0 + 1e-6) {
            prop_assert!(rho < 1.0);
            prop_assert!(validate_kappa(&g, kappa).is_ok());
        } else if kappa < lmax / 2.0 * (1.0 - 1e-6) {
            prop_assert!(rho >= 1.0);
            prop_assert!(validate_kappa(&g, kappa).is_err());
        }
    }

    #[test]
    fn powers_of_the_deviation_map_decay_like_rho(g in connected_graph(8), margin in 0.55f64..3.0) {
        let lmax = g.laplacian_eigenvalues().into_iter().fold(0.0, f64::max);
        let kappa = margin * lmax;
        let n = g.agent_count();
        let m = g.mixing_matrix(kappa) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let rho = mixing_factor(&g, kappa).unwrap();
        let norm = |a: &DMatrix<f64>| a.clone().singular_values().amax();
        let c = norm(&m) / rho.max(1e-300);
        let mut p = m.clone();
        for s in 1..=50 {
            prop_assert!(norm(&p) <= c * rho.powi(s) * (1.0 + 1e-9) + 1e-12);
            p = &p * &m;
        }
    }

    #[test]
    fn mixing_terms_cancel_under_summation(
        g in connected_graph(6),
        values in proptest::collection::vec(-10.0f64..10.0, 6 * 4),
        kappa_scale in 0.6f64..2.0,
    ) {
        let n = g.agent_count();
        let lmax = g.laplacian_eigenvalues().into_iter().fold(0.0, f64::max);
        let kappa = kappa_scale * lmax;
        let own: Vec<&[f64]> = (0..n).map(|i| &values[4 * i..4 * i + 4]).collect();
        let mut total = [0.0f64; 4];
        for i in 0..n {
            let neighbors: Vec<(f64, &[f64])> = g
                .neighbors(i)
                .unwrap()
                .iter()
                .map(|&j| (g.weight(i, j), own[j]))
                .collect();
            // With δ = 0 and the target equal to `own`, only the mixing term remains.
            let mixed = mix_and_relax(own[i], own[i], &neighbors, 0.0, kappa);
            for k in 0..4 {
                total[k] += mixed[k] - own[i][k];
            }
        }
        for t in total {
            prop_assert!(t.abs() < 1e-12);
        }
    }

    #[test]
    fn lifts_average_to_the_stacked_system(
        agents in 1usize..=6,
        n in 1usize..=3,
        m in 1usize..=2,
        seed in proptest::collection::vec(-5.0f64..5.0, 18),
    ) {
        let mut drift_avg = DVector::zeros(n * agents);
        let mut input_avg = DMatrix::zeros(n * agents, m * agents);
        let mut x0_avg = DVector::zeros(n * agents);
        let mut stacked_drift = DVector::zeros(n * agents);
        let mut stacked_input = DMatrix::zeros(n * agents, m * agents);
        for i in 0..agents {
            let v: Vec<f64> = (0..n).map(|k| seed[(i * n + k) % seed.len()]).collect();
            let g = DMatrix::from_fn(n, m, |a, b| seed[(i + a * m + b) % seed.len()]);
            drift_avg += lift_drift(i, agents, &v).unwrap();
            x0_avg += lift_initial(i, agents, &v).unwrap();
            input_avg += lift_input(i, agents, &g).unwrap();
            stacked_drift.rows_mut(i * n, n).copy_from_slice(&v);
            stacked_input.view_mut((i * n, i * m), (n, m)).copy_from(&g);
        }
        let inv = 1.0 / agents as f64;
        prop_assert!((drift_avg * inv - &stacked_drift).amax() <= 1e-12 * (1.0 + stacked_drift.amax()));
        prop_assert!((x0_avg * inv - &stacked_drift).amax() <= 1e-12 * (1.0 + stacked_drift.amax()));
        prop_assert!((input_avg * inv - &stacked_input).amax() <= 1e-12 * (1.0 + stacked_input.amax()));
    }

    #[test]
    fn cost_slices_average_to_the_weights(
        agents in 1usize..=5,
        seed in proptest::collection::vec(-2.0f64..2.0, 25),
    ) {
        let (n, m) = (2usize, 1usize);
        let q = spd(n * agents, &seed, 0.0);
        let r = spd(m * agents, &seed[3..], 0.1);
        let spec = CostSpec::new(q.clone(), r.clone(), agents, None).unwrap();
        let mut q_avg = DMatrix::zeros(n * agents, n * agents);
        let mut r_avg = DMatrix::zeros(m * agents, m * agents);
        for i in 0..agents {
            q_avg += spec.q_slice(i);
            r_avg += spec.r_slice(i);
        }
        let inv = 1.0 / agents as f64;
        prop_assert!((q_avg * inv - &q).amax() <= 1e-12 * q.amax().max(1.0));
        prop_assert!((r_avg * inv - &r).amax() <= 1e-12 * r.amax().max(1.0));
    }

    #[test]
    fn global_drift_equals_average_of_lifts(
        agents in 1usize..=4,
        xs in proptest::collection::vec(-3.0f64..3.0, 12),
    ) {
        let models: Vec<AgentModel> = (0..agents)
            .map(|i| AgentModel::unicycle([xs[3 * i], xs[3 * i + 1], xs[3 * i + 2]]))
            .collect();
        let cost = CostSpec::new(
            DMatrix::identity(3 * agents, 3 * agents),
            DMatrix::identity(2 * agents, 2 * agents),
            agents,
            None,
        )
        .unwrap();
        let sys = GlobalSystem::new(models, cost).unwrap();
        let x = &xs[..3 * agents];
        prop_assert!((sys.drift(x).unwrap() - sys.drift_from_lifts(x).unwrap()).amax() <= 1e-12);
        prop_assert!((sys.input_map(x).unwrap() - sys.input_map_from_lifts(x).unwrap()).amax() <= 1e-12);
    }

    #[test]
    fn imq_gradient_matches_central_differences(
        dim in 1usize..=4,
        shape in 0.3f64..5.0,
        coords in proptest::collection::vec(-2.0f64..2.0, 8),
    ) {
        let center = DMatrix::from_fn(dim, 1, |k, _| coords[k]);
        let basis = RbfBasis::new(center, shape).unwrap();
        let x: Vec<f64> = (0..dim).map(|k| coords[4 + k] + 0.1).collect();
        let grad = basis.grad_phi(0, &x);
        let h = 1e-5;
        for k in 0..dim {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (basis.phi(0, &a) - basis.phi(0, &b)) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / grad.norm().max(1e-12);
            prop_assert!(rel < 1e-6, "component {k}: fd {fd} analytic {}", grad[k]);
        }
    }

    #[test]
    fn collocation_matrix_is_positive_definite(
        dim in 1usize..=3,
        count in 2usize..=50,
        offset in 0u64..1000,
        relative_shape in 0.25f64..1.0,
    ) {
        // The smallest eigenvalue decays fast as z grows against the point spacing;
        // keeping z on the spacing's scale leaves it above round-off.
        let bounds = Bounds::new(DVector::from_element(dim, -2.0), DVector::from_element(dim, 2.0)).unwrap();
        let spacing = 4.0 / (count as f64).powf(1.0 / dim as f64);
        let basis = RbfBasis::new(halton_points(&bounds, count, offset), relative_shape * spacing).unwrap();
        let a = Collocation::new(Arc::new(basis)).matrix().clone();
        let min = a.symmetric_eigenvalues().min();
        prop_assert!(min > 0.0, "min eigenvalue {min}");
    }

    #[test]
    fn backward_step_leaves_tiny_residual(
        seed in proptest::collection::vec(-1.0f64..1.0, 64),
        count in 5usize..=30,
    ) {
        let bounds = Bounds::new(DVector::from_element(2, -1.5), DVector::from_element(2, 1.5)).unwrap();
        let colloc = Collocation::new(Arc::new(RbfBasis::new(halton_points(&bounds, count, 3), 1.0).unwrap()));
        let velocities = DMatrix::from_fn(2, count, |k, j| seed[(2 * j + k) % seed.len()]);
        let next = RowDVector::from_fn(count, |_, j| seed[(j + 7) % seed.len()]);
        let source = RowDVector::from_fn(count, |_, j| seed[(j + 11) % seed.len()].abs());
        let dt = 0.02;
        let (theta, _) = backward_step(&colloc, &velocities, &next, &source, dt, 0).unwrap();
        let b = colloc.advection_matrix(&velocities).unwrap();
        let residual = (&next - &theta) / dt * colloc.matrix() + &theta * b + &source;
        let scale = source.amax().max(1.0);
        prop_assert!(residual.amax() < 1e-9 * scale, "residual {}", residual.amax());
    }
}

#[test]
fn terminal_value_is_exactly_zero() {
    let grid = TimeGrid::new(1.0, 11).unwrap();
    let bounds = Bounds::new(
        DVector::from_element(1, -1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let colloc = Collocation::new(Arc::new(
        RbfBasis::new(halton_points(&bounds, 10, 0), 1.0).unwrap(),
    ));
    let mut fields = distopt_core::rbf::PdeFields::zeros(grid.len(), 1, 10);
    fields.source.fill(1.0);
    let v = distopt_core::rbf::solve_linear_pde(&colloc, &fields, &grid).unwrap();
    for x in [-3.0, 0.0, 0.25, 10.0] {
        assert_eq!(v.value(grid.len() - 1, &[x]), 0.0);
    }
    assert_relative_eq!(v.value(0, &[0.0]), 1.0, max_relative = 1e-3);
}
