use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("duplicate unit id `{0}`")]
    DuplicateId(String),

    #[error("frame is invalid: {}", .0.join("; "))]
    InvalidFrame(Vec<String>),

    #[error("covariate `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("covariate count mismatch: expected {expected}, found {found}")]
    CovariateMismatch { expected: usize, found: usize },

    #[error("covariate index {index} out of range (frame has {count} covariates)")]
    CovariateIndex { index: usize, count: usize },

    #[error("invalid outcome range [{lo}, {hi}]: lower endpoint must be below upper")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("separation detected ({0}); refit with the ridge penalty enabled")]
    Separation(String),

    #[error("weighted normal equations are singular (rank-deficient design)")]
    RankDeficient,

    #[error("empty {arm} arm{}", .stratum.map(|s| format!(" in stratum {s}")).unwrap_or_default())]
    EmptyArm {
        arm: &'static str,
        stratum: Option<usize>,
    },

    #[error("stratum minima unsatisfiable: need {min_treated} treated / {min_control} control, sample has {treated} / {control}")]
    UnsatisfiableStrata {
        min_treated: usize,
        min_control: usize,
        treated: usize,
        control: usize,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("config: {0}")]
    Config(String),

    #[error("replication {rep}: {source}")]
    Replication {
        rep: usize,
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

    /// Process exit code for the command-line front end.
    ///
    /// 2 is reserved for separation and 3 for unsatisfiable stratum minima;
    /// every other failure maps to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Separation(_) => 2,
            Error::UnsatisfiableStrata { .. } => 3,
            Error::Replication { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
