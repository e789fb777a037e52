use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped by the process exit code the CLI maps them to:
/// I/O and parse failures (1), validation failures (2) and numeric aborts (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("{what} out of range: {value} not in {lo}..={hi}")]
    Range {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },
    #[error("size error: {0}")]
    Size(String),
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("taxonomy contains a cycle through '{0}'")]
    Cycle(String),
    #[error("taxonomy must have exactly one root, found {0:?}")]
    Root(Vec<String>),
    #[error("no information content for concept '{0}'")]
    MissingIc(String),
    #[error("information content decreases along edge {child} -> {parent} ({child_ic} < {parent_ic})")]
    Monotonicity {
        child: String,
        parent: String,
        child_ic: f64,
        parent_ic: f64,
    },
    #[error("unknown concept '{0}'")]
    UnknownConcept(String),

    #[error("incomplete input: {0}")]
    Incomplete(String),
    #[error("enumeration too large: {0} assignments exceed the guard")]
    TooLarge(u128),
    #[error("no balance-feasible assignment: {0}")]
    Infeasible(String),
    #[error("DISJOINTNESS: unseen compositions overlap task compositions: {0}")]
    Disjointness(String),
    #[error("task {0} received no compositions")]
    EmptyTask(usize),
    #[error("benchmark failed validation:\n{0}")]
    Validation(String),

    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("zero-norm vector: {0}")]
    Norm(String),
    #[error("not a probability vector: {0}")]
    Simplex(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing anchor: {0}")]
    MissingAnchor(String),
    #[error("distillation requires a frozen encoder (step {0})")]
    MissingFrozen(usize),
    #[error("task order violated: expected step {expected}, got {got}")]
    Order { expected: usize, got: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) | Error::Format { .. } => 1,
            Error::Numeric(_) | Error::Norm(_) | Error::Simplex(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
