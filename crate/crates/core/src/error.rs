use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("protocol `{0}` has no constraints")]
    EmptyProtocol(String),
    #[error("duplicate metric id `{0}`")]
    DuplicateMetricId(String),
    #[error("constraint `{metric_id}` has non-positive limit {limit}")]
    NonPositiveLimit { metric_id: String, limit: f64 },
    #[error("constraint `{metric_id}`: unit `{unit}` does not match metric kind {kind}")]
    UnitMismatch {
        metric_id: String,
        unit: String,
        kind: String,
    },
    #[error("plan id must be non-empty")]
    EmptyPlanId,
    #[error("plan `{plan_id}` is missing metric `{metric_id}`")]
    MissingMetric { plan_id: String, metric_id: String },
    #[error("plan `{plan_id}` carries metric `{metric_id}` not in its protocol")]
    ExtraMetric { plan_id: String, metric_id: String },
    #[error("plan `{plan_id}` metric `{metric_id}` is not finite")]
    NonFiniteValue { plan_id: String, metric_id: String },
    #[error("plan `{plan_id}` metric `{metric_id}` is negative ({value})")]
    NegativeValue {
        plan_id: String,
        metric_id: String,
        value: f64,
    },
    #[error("plan `{plan_id}` belongs to protocol `{found}`, expected `{expected}`")]
    ProtocolMismatch {
        plan_id: String,
        found: String,
        expected: String,
    },

    #[error("empty input")]
    EmptyInput,
    #[error("non-positive value {0} in geometric mean input")]
    NonPositiveValue(f64),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("member gm {0} not found in cohort")]
    MemberNotFound(f64),

    #[error("plan `{plan_id}` references unknown protocol `{protocol}`")]
    UnknownProtocol { plan_id: String, protocol: String },
    #[error("duplicate plan id `{plan_id}` in protocol `{protocol}`")]
    DuplicatePlanId { plan_id: String, protocol: String },
    #[error("split fraction {0} outside [0, 1)")]
    InvalidSplit(f64),
    #[error("knowledge-base format version `{found}` is not supported (expected `{expected}`)")]
    FormatVersionMismatch { found: String, expected: String },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("embedding provider failure: {0}")]
    EmbeddingProvider(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("protocol cohort has {available} entries, retrieval needs k = {k}")]
    InsufficientCohort { k: usize, available: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),

    #[error("point coordinate {value} at index {index} outside [0, 1]")]
    OutOfBounds { index: usize, value: f64 },
    #[error("kernel matrix not positive definite even with jitter {0:e}")]
    SingularKernel(f64),
    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),

    #[error("chat backend failure: {0}")]
    Backend(String),

    #[error("lexicon has {available} metrics, {requested} requested")]
    LexiconExhausted { requested: usize, available: usize },
    #[error("invalid synthesis config: {0}")]
    InvalidSynthConfig(String),
}

impl Error {
    /// Stable, machine-parseable category used by the CLI and service.
    pub fn category(&self) -> &'static str {
        use Error::*;
        match self {
            EmptyProtocol(_)
            | DuplicateMetricId(_)
            | NonPositiveLimit { .. }
            | UnitMismatch { .. }
            | EmptyPlanId
            | MissingMetric { .. }
            | ExtraMetric { .. }
            | NonFiniteValue { .. }
            | NegativeValue { .. }
            | ProtocolMismatch { .. } => "validation",
            EmptyInput | NonPositiveValue(_) | EmptyCohort | MemberNotFound(_) => "scoring",
            UnknownProtocol { .. } | DuplicatePlanId { .. } | InvalidSplit(_) => "knowledge_base",
            FormatVersionMismatch { .. } | CorruptFile(_) => "format",
            Io { .. } => "io",
            EmbeddingProvider(_) | DimensionMismatch { .. } => "embedding",
            InsufficientCohort { .. } | InvalidConfig(_) => "retrieval",
            LengthMismatch { .. } => "metrics",
            OutOfBounds { .. } | SingularKernel(_) | InvalidOptimizer(_) => "tuner",
            Backend(_) => "backend",
            LexiconExhausted { .. } | InvalidSynthConfig(_) => "synth",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
