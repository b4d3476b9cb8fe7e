use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-finite value in column `{column}` at row {row}")]
    NonFiniteValue { column: String, row: usize },
    #[error("heterogeneous schema: {0}")]
    HeterogeneousSchema(String),
    #[error("empty table")]
    EmptyTable,
    #[error("bad fold count: {0}")]
    BadFoldCount(String),
    #[error("treatment arm {0} has no observations")]
    ArmMissing(u8),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("probability out of range: {0}")]
    OutOfRange(f64),
    #[error("empty evaluation set")]
    EmptyEvaluationSet,
    #[error("all points identical; bandwidth undefined")]
    AllPointsIdentical,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset has no instrument column")]
    MissingInstrument,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no kernel mass within 6 bandwidths of dose {0}")]
    ZeroKernelMass(f64),
    #[error("weak instrument: first-stage covariance {0:e}")]
    WeakInstrument(f64),
    #[error("estimates mix targets or estimator kinds")]
    MixedTargets,
    #[error("unsupported oracle target: {0}")]
    UnsupportedTarget(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code class: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::BadFoldCount(_) | Error::UnsupportedTarget(_) => 2,
            Error::MissingColumn(_)
            | Error::NonFiniteValue { .. }
            | Error::HeterogeneousSchema(_)
            | Error::EmptyTable
            | Error::ArmMissing(_)
            | Error::MissingInstrument
            | Error::LengthMismatch(..)
            | Error::IoFailure(_) => 3,
            Error::Replicate { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
