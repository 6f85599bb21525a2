//! Scenario files: one JSON document per experiment.
//!
//! Agent indices in files are 1-based, matching how scenarios are usually
//! written down; everything downstream is 0-based.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use distopt_core::cost::CostSpec;
use distopt_core::dva::{DvaSettings, Probe, StepRule};
use distopt_core::dynamics::{rollout, AgentModel, TimeGrid};
use distopt_core::graph::{validate_kappa, Graph, MixingConfig};
use distopt_core::hjb::GlobalSystem;
use distopt_core::rbf::{halton_points, trajectory_points, Bounds, CenterStrategy, RbfBasis};
use distopt_core::{DMatrix, DVector};
use serde::Deserialize;

pub const DEFAULT_CENTERS: usize = 150;
pub const DEFAULT_SWEEPS: usize = 5;
pub const DEFAULT_ROUNDS: usize = 50;
pub const DEFAULT_MEMORY_CAP_MB: f64 = 4096.0;
/// Runs estimated above this many floating-point operations get a warning first.
pub const LARGE_RUN_FLOPS: f64 = 5e11;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl ToString) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum AgentSpec {
    Unicycle {
        x0: Vec<f64>,
    },
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        x0: Vec<f64>,
    },
}

/// A weighting matrix written densely, as `s·I`, or block by block.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MatrixSpec {
    Dense(Vec<Vec<f64>>),
    ScalarIdentity { scalar_identity: f64 },
    Blocks { blocks: BTreeMap<String, BlockSpec> },
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BlockSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

/// An undirected edge `[a, b]` or `[a, b, weight]`, 1-based.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum EdgeSpec {
    Plain([usize; 2]),
    Weighted(usize, usize, f64),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    #[serde(default)]
    pub centers: Option<usize>,
    pub shape: f64,
    #[serde(default)]
    pub strategy: Option<String>,
    /// Box for center placement; per-agent (length n, tiled) or augmented (length nN).
    #[serde(default)]
    pub bounds: Option<BoundsSpec>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub sweep: usize,
    pub round: usize,
    pub reader: usize,
    pub owner: usize,
}

/// The file as written.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    #[serde(rename = "Q")]
    pub q: MatrixSpec,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
    pub kappa: f64,
    pub horizon: f64,
    pub time_steps: usize,
    pub basis: BasisSpec,
    #[serde(default)]
    pub sweeps: Option<usize>,
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub schedule: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub share_coefficients: bool,
    /// Fault injection; 1-based agent ids, 0-based sweep, 1-based round.
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
    #[serde(default)]
    pub memory_cap_mb: Option<f64>,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sweeps: Option<usize>,
    pub rounds: Option<usize>,
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub path: PathBuf,
    /// SHA-256 of the file bytes, hex encoded.
    pub digest: String,
    pub models: Vec<AgentModel>,
    pub graph: Graph,
    pub cost: CostSpec,
    pub mixing: Option<MixingConfig>,
    pub kappa: f64,
    pub grid: TimeGrid,
    pub centers: usize,
    pub shape: f64,
    pub strategy: CenterStrategy,
    pub bounds: Bounds,
    pub seed: u64,
    pub settings: DvaSettings,
    pub memory_cap_mb: f64,
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(invalid(field, "matrix is empty"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(field, "rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn parse_block_key(field: &str, key: &str, agents: usize) -> Result<(usize, usize), ConfigError> {
    let trimmed = key.trim().trim_start_matches('(').trim_end_matches(')');
    let mut parts = trimmed.split(',').map(|p| p.trim().parse::<usize>());
    let (Some(Ok(i)), Some(Ok(j)), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(invalid(
            field,
            format!("block key {key:?} is not of the form \"i,j\""),
        ));
    };
    if i == 0 || j == 0 || i > agents || j > agents {
        return Err(invalid(
            field,
            format!("block key {key:?} is outside 1..={agents}"),
        ));
    }
    Ok((i - 1, j - 1))
}

/// Builds an `(agents·block) × (agents·block)` matrix from its spec.
pub fn build_matrix(
    field: &str,
    spec: &MatrixSpec,
    agents: usize,
    block: usize,
) -> Result<DMatrix<f64>, ConfigError> {
    let dim = agents * block;
    let m = match spec {
        MatrixSpec::Dense(rows) => matrix_from_rows(field, rows)?,
        MatrixSpec::ScalarIdentity { scalar_identity } => {
            DMatrix::identity(dim, dim) * *scalar_identity
        }
        MatrixSpec::Blocks { blocks } => {
            let mut m = DMatrix::zeros(dim, dim);
            let mut seen = BTreeMap::new();
            for (key, value) in blocks {
                let (i, j) = parse_block_key(field, key, agents)?;
                let b = match value {
                    BlockSpec::Scalar(s) => DMatrix::identity(block, block) * *s,
                    BlockSpec::Matrix(rows) => matrix_from_rows(field, rows)?,
                };
                if b.shape() != (block, block) {
                    return Err(invalid(
                        field,
                        format!("block {key:?} must be {block}×{block}"),
                    ));
                }
                if seen.insert((i, j), ()).is_some() {
                    return Err(invalid(
                        field,
                        format!("block ({},{}) given twice", i + 1, j + 1),
                    ));
                }
                m.view_mut((i * block, j * block), (block, block))
                    .copy_from(&b);
            }
            // Unlisted mirror blocks are filled by symmetry.
            for &(i, j) in seen.keys() {
                if !seen.contains_key(&(j, i)) {
                    let t = m.view((i * block, j * block), (block, block)).transpose();
                    m.view_mut((j * block, i * block), (block, block))
                        .copy_from(&t);
                }
            }
            m
        }
    };
    if m.shape() != (dim, dim) {
        return Err(invalid(
            field,
            format!("expected {dim}×{dim}, found {}×{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m)
}

fn build_models(agents: &[AgentSpec]) -> Result<Vec<AgentModel>, ConfigError> {
    if agents.is_empty() {
        return Err(invalid("agents", "at least one agent is required"));
    }
    let models = agents
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let field = format!("agents[{k}]");
            let (AgentSpec::Unicycle { x0 } | AgentSpec::Linear { x0, .. }) = spec;
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(invalid(field, "x0 must be finite"));
            }
            match spec {
                AgentSpec::Unicycle { x0 } => {
                    let x0: [f64; 3] = x0
                        .as_slice()
                        .try_into()
                        .map_err(|_| invalid(&field, "unicycle x0 needs exactly 3 entries"))?;
                    Ok(AgentModel::unicycle(x0))
                }
                AgentSpec::Linear { a, b, x0 } => AgentModel::linear(
                    matrix_from_rows(&format!("{field}.A"), a)?,
                    matrix_from_rows(&format!("{field}.B"), b)?,
                    DVector::from_column_slice(x0),
                )
                .map_err(|e| invalid(field, e)),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (n, m) = (models[0].state_dim(), models[0].control_dim());
    if models
        .iter()
        .any(|a| a.state_dim() != n || a.control_dim() != m)
    {
        return Err(invalid(
            "agents",
            "all agents must share state and control dimensions",
        ));
    }
    Ok(models)
}

fn build_graph(agents: usize, edges: &[EdgeSpec]) -> Result<Graph, ConfigError> {
    let mut list = Vec::with_capacity(edges.len());
    for (k, e) in edges.iter().enumerate() {
        let (a, b, w) = match *e {
            EdgeSpec::Plain([a, b]) => (a, b, 1.0),
            EdgeSpec::Weighted(a, b, w) => (a, b, w),
        };
        if a == 0 || b == 0 {
            return Err(invalid(format!("edges[{k}]"), "agent ids start at 1"));
        }
        list.push((a - 1, b - 1, w));
    }
    Graph::new(agents, &list).map_err(|e| invalid("edges", e))
}

impl RawConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_config(path: &Path, overrides: Overrides) -> Result<ScenarioConfig, ConfigError> {
    let bytes = fs::read(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    let raw = RawConfig::parse(path, &text)?;
    let digest = {
        use sha2::Digest;
        hex::encode(sha2::Sha256::digest(&bytes))
    };
    validate(raw, path, digest, overrides)
}

/// Validates a parsed scenario; `digest` is recorded as given.
pub fn validate(
    raw: RawConfig,
    path: &Path,
    digest: String,
    overrides: Overrides,
) -> Result<ScenarioConfig, ConfigError> {
    let models = build_models(&raw.agents)?;
    let agents = models.len();
    let (n, m) = (models[0].state_dim(), models[0].control_dim());
    let graph = build_graph(agents, &raw.edges)?;

    let q = build_matrix("Q", &raw.q, agents, n)?;
    let r = build_matrix("R", &raw.r, agents, m)?;
    let cost = CostSpec::new(q, r, agents, Some(&graph)).map_err(|e| match e {
        distopt_core::Error::NotPd { .. } => invalid("R", e),
        distopt_core::Error::TopologyViolation { .. } => invalid("edges", e),
        _ => invalid("Q", e),
    })?;

    if !(raw.kappa > 0.0) || !raw.kappa.is_finite() {
        return Err(invalid("kappa", "must be positive"));
    }
    // A single agent has nothing to mix; κ is only checked when there are neighbors.
    let mixing = if agents > 1 {
        Some(validate_kappa(&graph, raw.kappa).map_err(|e| invalid("kappa", e))?)
    } else {
        None
    };

    let grid = TimeGrid::new(raw.horizon, raw.time_steps).map_err(|e| invalid("horizon", e))?;

    let centers = raw.basis.centers.unwrap_or(DEFAULT_CENTERS);
    if centers == 0 {
        return Err(invalid("basis.centers", "must be positive"));
    }
    if !(raw.basis.shape > 0.0) || !raw.basis.shape.is_finite() {
        return Err(invalid("basis.shape", "must be positive"));
    }
    let strategy = CenterStrategy::from_str(raw.basis.strategy.as_deref().unwrap_or("trajectory"))
        .map_err(|e| invalid("basis.strategy", e))?;
    let bounds = match &raw.basis.bounds {
        None => Bounds::around_initial_states(
            &models.iter().map(|a| a.x0().clone()).collect::<Vec<_>>(),
        ),
        Some(b) => {
            let tile = |v: &[f64]| -> DVector<f64> {
                if v.len() == n && agents > 1 {
                    DVector::from_iterator(n * agents, (0..agents).flat_map(|_| v.iter().copied()))
                } else {
                    DVector::from_column_slice(v)
                }
            };
            let (lower, upper) = (tile(&b.lower), tile(&b.upper));
            if lower.len() != n * agents || upper.len() != n * agents {
                return Err(invalid(
                    "basis.bounds",
                    format!("expected {n} or {} entries", n * agents),
                ));
            }
            Bounds::new(lower, upper)
        }
    }
    .map_err(|e| invalid("basis.bounds", e))?;

    let schedule = StepRule::from_str(raw.schedule.as_deref().unwrap_or("one_over_s"))
        .map_err(|e| invalid("schedule", e))?;
    let sweeps = overrides.sweeps.or(raw.sweeps).unwrap_or(DEFAULT_SWEEPS);
    let rounds = overrides.rounds.or(raw.rounds).unwrap_or(DEFAULT_ROUNDS);
    if sweeps == 0 {
        return Err(invalid("sweeps", "must be at least 1"));
    }
    if rounds == 0 {
        return Err(invalid("rounds", "must be at least 1"));
    }
    let probe = match raw.probe {
        None => None,
        Some(p) => {
            if p.reader == 0 || p.owner == 0 || p.reader > agents || p.owner > agents {
                return Err(invalid(
                    "probe",
                    format!("agent ids must lie in 1..={agents}"),
                ));
            }
            Some(Probe {
                sweep: p.sweep,
                round: p.round,
                reader: p.reader - 1,
                owner: p.owner - 1,
            })
        }
    };
    let memory_cap_mb = raw.memory_cap_mb.unwrap_or(DEFAULT_MEMORY_CAP_MB);
    let config = ScenarioConfig {
        name: raw.name.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scenario".into())
        }),
        path: path.to_path_buf(),
        digest,
        models,
        graph,
        cost,
        mixing,
        kappa: raw.kappa,
        grid,
        centers,
        shape: raw.basis.shape,
        strategy,
        bounds,
        seed: overrides.seed.unwrap_or(raw.seed),
        settings: DvaSettings {
            sweeps,
            rounds,
            schedule,
            share_coefficients: raw.share_coefficients,
            probe,
        },
        memory_cap_mb,
    };
    let needed = config.buffer_megabytes();
    if needed > memory_cap_mb {
        return Err(invalid(
            "memory_cap_mb",
            format!("the value-coefficient buffers need {needed:.0} MB, above the {memory_cap_mb:.0} MB cap"),
        ));
    }
    Ok(config)
}

impl ScenarioConfig {
    pub fn agents(&self) -> usize {
        self.models.len()
    }

    pub fn state_dim(&self) -> usize {
        self.cost.state_dim() * self.agents()
    }

    /// Memory of the two sweeps of value coefficients kept by a distributed run.
    pub fn buffer_megabytes(&self) -> f64 {
        2.0 * (self.agents() * self.settings.rounds * self.grid.len() * self.centers) as f64 * 8.0
            / (1024.0 * 1024.0)
    }

    /// Rough operation count of a distributed run, dominated by the dense solves.
    pub fn estimated_flops(&self) -> f64 {
        let m = self.centers as f64;
        let d = self.state_dim() as f64;
        let per_step = (2.0 / 3.0) * m * m * m + 4.0 * d * m * m;
        (self.settings.sweeps * self.settings.rounds * self.agents() * self.grid.len()) as f64
            * per_step
    }

    pub fn global_system(&self) -> GlobalSystem {
        GlobalSystem::new(self.models.clone(), self.cost.clone())
            .expect("dimensions checked during validation")
    }

    /// The collocation basis shared by every agent and the centralized solver.
    pub fn basis(&self) -> Result<Arc<RbfBasis>, distopt_core::Error> {
        let centers = match self.strategy {
            CenterStrategy::HaltonBox => halton_points(&self.bounds, self.centers, self.seed),
            CenterStrategy::Trajectory => {
                let control_dim = self.cost.control_dim() * self.agents();
                let path = rollout(&self.models, |_, _| DVector::zeros(control_dim), &self.grid)?;
                trajectory_points(&path, &self.bounds, self.centers, self.seed)?
            }
        };
        Ok(Arc::new(RbfBasis::new(centers, self.shape)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_json(extra: &str) -> String {
        format!(
            r#"{{
              "agents": [
                {{"model": "linear", "A": [[0]], "B": [[1]], "x0": [1.0]}},
                {{"model": "linear", "A": [[0]], "B": [[1]], "x0": [-0.5]}}
              ],
              "edges": [[1, 2]],
              "Q": [[2, -2], [-2, 2]],
              "R": {{"scalar_identity": 1.0}},
              "kappa": 1.5,
              "horizon": 1.0,
              "time_steps": 51,
              "basis": {{"centers": 60, "shape": 1.0, "strategy": "halton-box"}}
              {extra}
            }}"#
        )
    }

    fn load_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let raw = RawConfig::parse(Path::new("inline.json"), text)?;
        validate(
            raw,
            Path::new("inline.json"),
            String::new(),
            Overrides::default(),
        )
    }

    #[test]
    fn defaults_applied() {
        let c = load_str(&pair_json("")).unwrap();
        assert_eq!(c.settings.sweeps, DEFAULT_SWEEPS);
        assert_eq!(c.settings.rounds, DEFAULT_ROUNDS);
        assert_eq!(c.settings.schedule, StepRule::OneOverS);
        assert_eq!(c.strategy, CenterStrategy::HaltonBox);
        assert_eq!(c.name, "inline");
        assert!((c.mixing.unwrap().rho - (1.0 - 2.0 / 1.5f64).abs()).abs() < 1e-12);
    }

    #[test]
    fn block_matrices_mirror_and_scale() {
        let spec: MatrixSpec =
            serde_json::from_str(r#"{"blocks": {"1,1": 2, "(1,2)": -2, "2,2": [[3, 0], [0, 4]]}}"#)
                .unwrap();
        let m = build_matrix("Q", &spec, 2, 2).unwrap();
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(2, 0)], -2.0);
        assert_eq!(m[(0, 2)], -2.0);
        assert_eq!(m[(0, 3)], 0.0);
        assert_eq!(m[(3, 3)], 4.0);
        let bad: MatrixSpec = serde_json::from_str(r#"{"blocks": {"1,3": 1}}"#).unwrap();
        assert!(matches!(
            build_matrix("Q", &bad, 2, 1),
            Err(ConfigError::Validation { .. })
        ));
    }

    #[test]
    fn missing_agents_is_a_parse_error() {
        let err = RawConfig::parse(Path::new("x.json"), r#"{"kappa": 1.0}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = RawConfig::parse(Path::new("x.json"), "{\n\"agents\": [,]\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
    }

    #[test]
    fn small_kappa_rejected() {
        let text = pair_json("").replace("\"kappa\": 1.5", "\"kappa\": 0.5");
        assert!(matches!(
            load_str(&text),
            Err(ConfigError::Validation { field, .. }) if field == "kappa"
        ));
    }

    #[test]
    fn cost_must_follow_topology() {
        let text = pair_json("").replace("\"edges\": [[1, 2]]", "\"edges\": []");
        assert!(matches!(
            load_str(&text),
            Err(ConfigError::Validation { field, .. }) if field == "edges"
        ));
    }

    #[test]
    fn unknown_schedule_and_strategy() {
        let text = pair_json(r#", "schedule": "halving""#);
        assert!(matches!(
            load_str(&text),
            Err(ConfigError::Validation { field, .. }) if field == "schedule"
        ));
        let text = pair_json("").replace("halton-box", "grid");
        assert!(matches!(
            load_str(&text),
            Err(ConfigError::Validation { field, .. }) if field == "basis.strategy"
        ));
    }

    #[test]
    fn memory_cap_enforced() {
        let text = pair_json(r#", "rounds": 100000, "memory_cap_mb": 64"#);
        assert!(matches!(
            load_str(&text),
            Err(ConfigError::Validation { field, .. }) if field == "memory_cap_mb"
        ));
    }

    #[test]
    fn probe_ids_are_one_based() {
        let c = load_str(&pair_json(
            r#", "probe": {"sweep": 0, "round": 1, "reader": 1, "owner": 2}"#,
        ))
        .unwrap();
        assert_eq!(
            c.settings.probe,
            Some(Probe {
                sweep: 0,
                round: 1,
                reader: 0,
                owner: 1
            })
        );
        assert!(load_str(&pair_json(
            r#", "probe": {"sweep": 0, "round": 1, "reader": 0, "owner": 2}"#
        ))
        .is_err());
    }

    #[test]
    fn overrides_win() {
        let raw = RawConfig::parse(Path::new("a.json"), &pair_json(r#", "sweeps": 3"#)).unwrap();
        let c = validate(
            raw,
            Path::new("a.json"),
            String::new(),
            Overrides {
                seed: Some(9),
                sweeps: Some(2),
                rounds: Some(7),
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.settings.sweeps, c.settings.rounds), (9, 2, 7));
    }

    #[test]
    fn bounds_tile_per_agent() {
        let c = load_str(&pair_json("").replace(
            r#""strategy": "halton-box""#,
            r#""strategy": "halton-box", "bounds": {"lower": [-1.5], "upper": [1.5]}"#,
        ))
        .unwrap();
        assert_eq!(c.bounds.lower().as_slice(), &[-1.5, -1.5]);
    }
}
