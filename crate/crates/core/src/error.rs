//! Crate-wide error type.
//!
//! Variants are grouped by the pipeline stage that raises them: file format,
//! schema compatibility, merge arithmetic, coefficient search, and external
//! evaluation. [`Error::exit_code`] maps each group onto the process exit
//! codes used by the command-line interface.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor byte ranges overlap or leave gaps: {0}")]
    OverlappingOffsets(String),

    #[error("unsupported dtype \"{0}\"")]
    UnsupportedDtype(String),

    #[error("shape mismatch for tensor \"{name}\": {expected:?} vs {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("dtype mismatch for tensor \"{name}\": {expected} vs {actual}")]
    DtypeMismatch {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("tensor \"{name}\" missing from checkpoint {index}")]
    MissingTensor { name: String, index: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("support construction infeasible: {0}")]
    InfeasibleSupports(String),

    #[error("fitness is not finite at {params:?}")]
    NonFiniteFitness { params: Vec<f64> },

    #[error("evaluator timed out after {0} s")]
    Timeout(u64),

    #[error("evaluator exited with status {code}: {stderr_tail}")]
    NonZeroExit { code: i32, stderr_tail: String },

    #[error("cannot parse a score from evaluator output: {0}")]
    UnparsableOutput(String),
}

impl Error {
    /// Short machine-readable tag, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::OverlappingOffsets(_) => "overlapping_offsets",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DtypeMismatch { .. } => "dtype_mismatch",
            Error::MissingTensor { .. } => "missing_tensor",
            Error::SchemaMismatch(_) => "schema_mismatch",
            Error::ZeroVector => "zero_vector",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InfeasibleSupports(_) => "infeasible_supports",
            Error::NonFiniteFitness { .. } => "non_finite_fitness",
            Error::Timeout(_) => "timeout",
            Error::NonZeroExit { .. } => "non_zero_exit",
            Error::UnparsableOutput(_) => "unparsable_output",
        }
    }

    /// Process exit code: 2 validation, 3 file I/O or format, 4 fitness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::OverlappingOffsets(_)
            | Error::UnsupportedDtype(_) => 3,
            Error::ShapeMismatch { .. }
            | Error::DtypeMismatch { .. }
            | Error::MissingTensor { .. }
            | Error::SchemaMismatch(_)
            | Error::ZeroVector
            | Error::LengthMismatch(_)
            | Error::InvalidConfig(_)
            | Error::InfeasibleSupports(_) => 2,
            Error::NonFiniteFitness { .. }
            | Error::Timeout(_)
            | Error::NonZeroExit { .. }
            | Error::UnparsableOutput(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
