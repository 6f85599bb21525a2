use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the numerical core can report.
///
/// Agent indices are zero-based here; the configuration layer translates them.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("agent {agent} has a self loop")]
    SelfLoop { agent: usize },
    #[error("edge ({a}, {b}) given more than once")]
    DuplicateEdge { a: usize, b: usize },
    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("edge weight {weight} is not positive")]
    NonPositiveWeight { weight: f64 },
    #[error("kappa must be positive, got {kappa}")]
    NonPositiveKappa { kappa: f64 },
    #[error("communication graph is disconnected")]
    GraphDisconnected,
    #[error("kappa too small: mixing factor {rho} is not below 1")]
    KappaTooSmall { rho: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("state became non-finite at t = {time}")]
    NonFiniteState { time: f64 },
    #[error("non-finite field for agent {agent} in round {round}")]
    NonFiniteField { agent: usize, round: usize },

    #[error("Q is not positive semidefinite (min eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("R is not positive definite (min eigenvalue {min_eigenvalue})")]
    NotPd { min_eigenvalue: f64 },
    #[error("{matrix} is not symmetric")]
    NotSymmetric { matrix: &'static str },
    #[error("weight block ({i}, {j}) is nonzero but agents {i} and {j} do not communicate")]
    TopologyViolation { i: usize, j: usize },
    #[error("R must be block diagonal for distributed runs")]
    RNotBlockDiagonal,

    #[error("points {a} and {b} coincide")]
    DegeneratePoints { a: usize, b: usize },
    #[error("RBF shape parameter must be positive, got {shape}")]
    NonPositiveShape { shape: f64 },
    #[error("singular collocation system at node {node} (condition estimate {condition:e})")]
    SingularSystem { node: usize, condition: f64 },
    #[error("empty or inverted sampling bounds")]
    EmptyBounds,
    #[error("agents must share one collocation point set")]
    BasisMismatch,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("unknown step-size rule `{0}`")]
    UnknownRule(String),

    #[error("agent {reader} requested the payload of non-neighbor {owner} in round {round}")]
    InformationStructureViolation {
        reader: usize,
        owner: usize,
        round: usize,
    },
    #[error("agent {agent} posted twice in round {round}")]
    DoublePost { agent: usize, round: usize },
    #[error("round {round} is incomplete")]
    RoundIncomplete { round: usize },
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            found,
        }
    }

    /// True for failures of the numerical pipeline (singular solves, blow-ups).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::NonFiniteField { .. }
                | Error::SingularSystem { .. }
        )
    }
}
