use thiserror::Error;

use crate::plan::PlanFingerprint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed plan: {0}")]
    MalformedPlan(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown table `{0}`")]
    UnknownTable(String),

    #[error("execution record has no latency measurements")]
    EmptyLatencies,

    #[error("workload is empty")]
    EmptyWorkload,

    #[error("join graph is disconnected: {0}")]
    DisconnectedJoinGraph(String),

    #[error("plan cover cannot reach the requested coverage {target:.4}; uncovered instances: {uncovered:?}")]
    CoverUnreachable { target: f64, uncovered: Vec<usize> },

    #[error("no execution record for instance {instance} and plan {plan}")]
    MissingRecord { instance: usize, plan: PlanFingerprint },

    #[error("plan {0} is not in the plan table")]
    UnknownPlan(PlanFingerprint),

    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    FormatVersion { found: u64, expected: u64 },

    #[error("executor failed: {0}")]
    Executor(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedPlan(_) => "malformed_plan",
            Error::InvalidTemplate(_) => "invalid_template",
            Error::InvalidSchema(_) => "invalid_schema",
            Error::InvalidInstance(_) => "invalid_instance",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownTable(_) => "unknown_table",
            Error::EmptyLatencies => "empty_latencies",
            Error::EmptyWorkload => "empty_workload",
            Error::DisconnectedJoinGraph(_) => "disconnected_join_graph",
            Error::CoverUnreachable { .. } => "cover_unreachable",
            Error::MissingRecord { .. } => "missing_record",
            Error::UnknownPlan(_) => "unknown_plan",
            Error::Format { .. } => "format",
            Error::FormatVersion { .. } => "format_version",
            Error::Executor(_) => "executor",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format { line, message: message.into() }
    }
}
