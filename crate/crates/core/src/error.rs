use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants fall in two families: data errors (malformed inputs, broken
/// invariants, misaligned vectors) and numeric failures (degenerate data,
/// singular systems, unreachable targets). [`Error::exit_code`] maps them to
/// the CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: schema error: {message}")]
    Schema {
        file: String,
        line: u64,
        message: String,
    },

    #[error("{file}:{line}: invariant violation: {message}")]
    InvariantViolation {
        file: String,
        line: u64,
        message: String,
    },

    #[error("invalid grade: {0}")]
    InvalidGrade(String),

    #[error("median of three is undefined for a categorical scale when all grades differ ({item})")]
    NonOrdinalTie { item: String },

    #[error("malformed grade log for image {image_id}: {message}")]
    MalformedLog { image_id: String, message: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("statistic undefined on bootstrap resample {index}: {message}")]
    StatisticUndefined { index: usize, message: String },

    #[error("both classes are required, found only {0}")]
    OneClassOnly(&'static str),

    #[error("{kind} target {target} cannot be reached on the tuning set")]
    TargetUnachievable { kind: String, target: f64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("information matrix is singular; collinear columns: {columns:?}")]
    SingularInformation { columns: Vec<String> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid probabilities for {image_id}: {message}")]
    InvalidProbabilities { image_id: String, message: String },

    #[error("patient {0} has no visits")]
    NoVisits(String),

    #[error("no images to aggregate")]
    NoImages,

    #[error("fundus mask not found: {0}")]
    MaskNotFound(String),

    #[error("augmentation parameter {name}={value} outside [{min}, {max}]")]
    ParamOutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),

    #[error("image codec error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// CLI exit status: 2 for data errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::DegenerateData(_)
            | Error::StatisticUndefined { .. }
            | Error::OneClassOnly(_)
            | Error::TargetUnachievable { .. }
            | Error::SingularInformation { .. }
            | Error::NonOrdinalTie { .. }
            | Error::MaskNotFound(_) => 3,
            _ => 2,
        }
    }
}
