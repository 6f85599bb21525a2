//! The five subcommands and their exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use distopt_core::dva::{DistributedProblem, DvaOutcome};
use distopt_core::dynamics::AgentModel;
use distopt_core::hjb::{riccati_solve, CentralSolver, CentralizedRun};
use distopt_core::rbf::Collocation;
use distopt_core::{DMatrix, DVector, Error};

use crate::config::{load_config, ConfigError, Overrides, ScenarioConfig, LARGE_RUN_FLOPS};
use crate::output::{self, CentralizedSummary, DistributedSummary, RunSummary};

/// Tolerance of the Riccati comparison in `oracle-lq`.
pub const ORACLE_TOL: f64 = 5e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Centralized,
    Distributed,
    Compare,
    OracleLq,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Centralized => "centralized",
            Command::Distributed => "distributed",
            Command::Compare => "compare",
            Command::OracleLq => "oracle-lq",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}", describe_core(.0))]
    Core(#[from] Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Oracle(String),
}

/// Core messages with agent ids shifted to the 1-based ids of scenario files.
fn describe_core(e: &Error) -> String {
    match *e {
        Error::InformationStructureViolation {
            reader,
            owner,
            round,
        } => format!(
            "agent {} requested the payload of non-neighbor {} in round {round}",
            reader + 1,
            owner + 1
        ),
        _ => e.to_string(),
    }
}

impl CliError {
    /// 1 IO or failed oracle, 2 configuration, 3 numerical, 4 information structure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(Error::InformationStructureViolation { .. }) => 4,
            CliError::Core(_) | CliError::NonFinite(_) => 3,
            CliError::Io { .. } | CliError::Oracle(_) => 1,
        }
    }
}

fn io_err(context: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        context: context.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub overrides: Overrides,
}

/// Result of a successful command: a summary for the run commands, nothing for `validate`.
#[derive(Debug)]
pub struct Completed {
    pub summary: Option<RunSummary>,
    pub report: Vec<String>,
}

pub fn execute(command: Command, args: &RunArgs) -> Result<Completed, CliError> {
    let config = load_config(&args.config, args.overrides)?;
    let flops = config.estimated_flops();
    if flops > LARGE_RUN_FLOPS && matches!(command, Command::Distributed | Command::Compare) {
        log::warn!(
            "large run: about {flops:.2e} flops for K = {}, S = {}",
            config.settings.sweeps,
            config.settings.rounds
        );
    }
    match command {
        Command::Validate => Ok(Completed {
            summary: None,
            report: validate_report(&config),
        }),
        Command::OracleLq => oracle_lq(&config),
        Command::Centralized | Command::Distributed | Command::Compare => {
            fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
            run(command, &config, &args.out)
        }
    }
}

fn validate_report(c: &ScenarioConfig) -> Vec<String> {
    let mut lines = vec![
        format!("scenario {} ({})", c.name, c.digest),
        format!(
            "agents {}, augmented state dimension {}, edges {}",
            c.agents(),
            c.state_dim(),
            c.graph.edges().len()
        ),
    ];
    if let Some(m) = c.mixing {
        lines.push(format!(
            "kappa {} gives mixing factor {:.6}",
            m.kappa, m.rho
        ));
    }
    lines.push(format!(
        "basis: {} centers, shape {}, grid {} nodes over T = {}",
        c.centers,
        c.shape,
        c.grid.len(),
        c.grid.horizon()
    ));
    lines.push(format!(
        "budget: K = {}, S = {}, buffers {:.1} MB, about {:.2e} flops",
        c.settings.sweeps,
        c.settings.rounds,
        c.buffer_megabytes(),
        c.estimated_flops()
    ));
    lines
}

fn run_centralized(
    config: &ScenarioConfig,
) -> Result<(CentralizedRun, CentralizedSummary), CliError> {
    let solver = CentralSolver::new(
        config.global_system(),
        Collocation::new(config.basis()?),
        config.grid,
    )?;
    let run = solver.run(config.settings.sweeps)?;
    if !run.cost.is_finite() {
        return Err(CliError::NonFinite(format!(
            "centralized performance index is {}",
            run.cost
        )));
    }
    let summary = CentralizedSummary {
        cost: run.cost,
        sweeps_run: run.sup_changes.len(),
        sup_changes: run.sup_changes.clone(),
        hjb_residuals: run.hjb_residuals.clone(),
        max_condition: run.value.max_condition(),
    };
    Ok((run, summary))
}

fn run_distributed(
    config: &ScenarioConfig,
    reference: Option<&CentralizedRun>,
) -> Result<(DvaOutcome, DistributedSummary), CliError> {
    let problem = DistributedProblem::new(
        config.global_system(),
        config.graph.clone(),
        Collocation::new(config.basis()?),
        config.grid,
        config.kappa,
    )?;
    let outcome = problem.run(&config.settings, reference)?;
    let report = &outcome.report;
    if report.access_violations > 0 {
        let a = report.access_log.violations(&config.graph)[0];
        return Err(Error::InformationStructureViolation {
            reader: a.reader,
            owner: a.owner,
            round: a.round,
        }
        .into());
    }
    if !outcome.cost.is_finite() {
        return Err(CliError::NonFinite(format!(
            "distributed performance index is {}",
            outcome.cost
        )));
    }
    let summary = DistributedSummary {
        cost: outcome.cost,
        rho: report.mixing.rho,
        final_consensus_dev: report.records.last().map_or(0.0, |r| r.consensus_dev),
        deviations: report.final_deviations.map(Into::into),
        access_records: report.access_log.len(),
        access_violations: report.access_violations,
        bytes_posted: report.bytes_posted,
    };
    Ok((outcome, summary))
}

fn run(command: Command, config: &ScenarioConfig, out: &Path) -> Result<Completed, CliError> {
    let started = Instant::now();
    let central = match command {
        Command::Centralized | Command::Compare => Some(run_centralized(config)?),
        _ => None,
    };
    let distributed = match command {
        Command::Distributed | Command::Compare => {
            Some(run_distributed(config, central.as_ref().map(|(r, _)| r))?)
        }
        _ => None,
    };
    let wall_time_s = started.elapsed().as_secs_f64();

    let path = |name: &str| out.join(name);
    let grid = &config.grid;
    let mut trajectories = Vec::new();
    if let Some((run, _)) = &central {
        trajectories.push(("centralized", &run.states));
    }
    if let Some((outcome, _)) = &distributed {
        let p = path("rounds.csv");
        output::write_rounds(&p, &outcome.report.records).map_err(io_err(&p))?;
        let p = path("access_log.csv");
        output::write_access_log(&p, &outcome.report.access_log).map_err(io_err(&p))?;
        trajectories.push(("distributed", &outcome.open_loop_states));
    }
    let (controls, reference) = match (&central, &distributed) {
        (Some((c, _)), Some((d, _))) => (&d.controller.stacked, Some(&c.controls)),
        (None, Some((d, _))) => (&d.controller.stacked, None),
        (Some((c, _)), None) => (&c.controls, None),
        (None, None) => unreachable!("run commands execute at least one pipeline"),
    };
    let p = path("controller.csv");
    output::write_controller(&p, grid, controls, reference).map_err(io_err(&p))?;
    let p = path("trajectories.csv");
    output::write_trajectories(&p, grid, &trajectories).map_err(io_err(&p))?;

    let central = central.map(|(_, s)| s);
    let distributed = distributed.map(|(_, s)| s);
    let relative_cost_gap = match (&central, &distributed) {
        (Some(c), Some(d)) => Some((d.cost - c.cost).abs() / c.cost.abs()),
        _ => None,
    };
    let summary = RunSummary {
        command: command.as_str().into(),
        scenario: config.name.clone(),
        config_digest: config.digest.clone(),
        seed: config.seed,
        agents: config.agents(),
        state_dim: config.state_dim(),
        centers: config.centers,
        shape: config.shape,
        horizon: grid.horizon(),
        time_steps: grid.len(),
        sweeps: config.settings.sweeps,
        rounds: config.settings.rounds,
        schedule: config.settings.schedule.as_str().into(),
        kappa: config.kappa,
        rho: config.mixing.map(|m| m.rho),
        centralized: central,
        distributed,
        relative_cost_gap,
        literature: Default::default(),
        wall_time_s,
    };
    let p = path("summary.json");
    output::write_summary(&p, &summary).map_err(io_err(&p))?;

    let mut report = Vec::new();
    if let Some(c) = &summary.centralized {
        report.push(format!("J_centralized = {}", c.cost));
    }
    if let Some(d) = &summary.distributed {
        report.push(format!("J_distributed = {}", d.cost));
        if let Some(dev) = d.deviations {
            report.push(format!(
                "deviations x {:.3e} F {:.3e} l {:.3e} V {:.3e} U {:.3e}",
                dev.x, dev.f, dev.l, dev.v, dev.u
            ));
        }
    }
    if let Some(g) = relative_cost_gap {
        report.push(format!("relative cost gap {g:.3e}"));
    }
    report.push(format!("outputs written to {}", out.display()));
    Ok(Completed {
        summary: Some(summary),
        report,
    })
}

/// Reads `(A, B)` off a linear model by probing its vector fields.
fn linear_parts(model: &AgentModel) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let n = model.state_dim();
    let zero = vec![0.0; n];
    let b = model.input_map(&zero);
    let a = DMatrix::from_fn(n, n, |i, j| {
        let mut e = zero.clone();
        e[j] = 1.0;
        model.drift(&e)[i]
    });
    // Check affinity at a second point before trusting the probe.
    let probe: Vec<f64> = (0..n).map(|k| 0.5 + k as f64).collect();
    let drift_ok = (model.drift(&probe) - &a * DVector::from_column_slice(&probe)).amax()
        <= 1e-12 * (1.0 + a.amax())
        && model.drift(&zero).amax() == 0.0;
    let input_ok = (model.input_map(&probe) - &b).amax() == 0.0;
    (drift_ok && input_ok).then_some((a, b))
}

fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(DMatrix::nrows).sum();
    let cols: usize = blocks.iter().map(DMatrix::ncols).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        m.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    m
}

fn oracle_lq(config: &ScenarioConfig) -> Result<Completed, CliError> {
    let parts = config
        .models
        .iter()
        .map(linear_parts)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ConfigError::Validation {
            field: "agents".into(),
            reason: "oracle-lq needs linear agents".into(),
        })?;
    let a = block_diagonal(&parts.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
    let b = block_diagonal(&parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
    let p = riccati_solve(&a, &b, config.cost.q(), config.cost.r(), &config.grid)?;
    let (run, _) = run_centralized(config)?;

    let rel = |approx: f64, exact: f64| (approx - exact).abs() / (1.0 + exact.abs());
    let centers = run.value.basis().centers().clone();
    let worst_value = (0..centers.ncols())
        .map(|j| {
            let c = centers.column(j).into_owned();
            rel(run.value.value(0, c.as_slice()), 0.5 * c.dot(&(&p[0] * &c)))
        })
        .fold(0.0, f64::max);
    let x0 = config.global_system().x0();
    let optimal = 0.5 * x0.dot(&(&p[0] * &x0));
    let cost_gap = rel(run.cost, optimal);

    let mut report = Vec::new();
    let mut failed = Vec::new();
    for (name, err) in [
        ("value at centers vs Riccati", worst_value),
        ("performance index vs Riccati", cost_gap),
    ] {
        let ok = err < ORACLE_TOL;
        report.push(format!(
            "{} {name}: {err:.3e} (tolerance {ORACLE_TOL:e})",
            if ok { "PASS" } else { "FAIL" }
        ));
        if !ok {
            failed.push(name);
        }
    }
    report.push(format!("J = {}, Riccati optimum {optimal}", run.cost));
    if failed.is_empty() {
        Ok(Completed {
            summary: None,
            report,
        })
    } else {
        for line in &report {
            println!("{line}");
        }
        Err(CliError::Oracle(format!(
            "oracle checks failed: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let v = CliError::Core(Error::InformationStructureViolation {
            reader: 0,
            owner: 2,
            round: 1,
        });
        assert_eq!(v.exit_code(), 4);
        assert_eq!(
            CliError::Core(Error::SingularSystem {
                node: 0,
                condition: 1e13
            })
            .exit_code(),
            3
        );
        assert_eq!(
            CliError::Config(ConfigError::Validation {
                field: "kappa".into(),
                reason: String::new()
            })
            .exit_code(),
            2
        );
        assert_eq!(CliError::Oracle(String::new()).exit_code(), 1);
    }

    #[test]
    fn linear_parts_recovers_matrices() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let m = AgentModel::linear(a.clone(), b.clone(), DVector::zeros(2)).unwrap();
        assert_eq!(linear_parts(&m), Some((a, b)));
        assert_eq!(linear_parts(&AgentModel::unicycle([0.0, 0.0, 0.3])), None);
    }

    #[test]
    fn block_diagonal_places_blocks() {
        let m = block_diagonal(&[DMatrix::from_element(1, 1, 2.0), DMatrix::identity(2, 2)]);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(2, 2)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
    }
}
