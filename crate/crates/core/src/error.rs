//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by graph construction, mask optimization, pruning,
/// dialogue execution, agent backends, and the experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("node id {id} is out of range for a graph with {n} nodes")]
    InvalidNodeId { id: usize, n: usize },

    #[error("spatial self-loop on node {0} is not allowed")]
    SpatialSelfLoop(usize),

    #[error("plugin name must be non-empty (node {0})")]
    EmptyPluginName(usize),

    #[error("graph contains no cycle")]
    NoCycle,

    #[error("graph contains a cycle; expected a DAG")]
    CyclicGraph,

    #[error("topology '{kind}' requires at least {needed} agents, got {got}")]
    TooFewAgents {
        kind: String,
        needed: usize,
        got: usize,
    },

    #[error("bad layer specification: {0}")]
    BadLayerSpec(String),

    #[error("edge probability {0} must lie in (0, 1]")]
    InvalidProbability(f64),

    #[error("mask init value {value} outside clamp bounds ({lo}, {hi})")]
    OutOfRangeInit { value: f64, lo: f64, hi: f64 },

    #[error("included edge ({0}, {1}) has zero mask probability")]
    ZeroProbabilityEdge(usize, usize),

    #[error("cannot estimate a gradient from zero rollouts")]
    EmptyRollouts,

    #[error("matrix contains a non-finite entry")]
    NonFiniteEntry,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("prune ratio {0} must lie in [0, 1)")]
    BadRatio(f64),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend timed out: {0}")]
    BackendTimeout(String),

    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),

    #[error("authentication failed: {0}")]
    AuthFailure(String),

    #[error("cannot aggregate an empty message list")]
    EmptyMessages,

    #[error("utility evaluator unavailable for the optimization phase")]
    UtilityEvaluatorMissing,

    #[error("need at least {needed} queries, got {got}")]
    InsufficientQueries { needed: usize, got: usize },

    #[error("baseline token count is zero")]
    ZeroBaseline,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
