use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate observation for unit {unit:?} at time {time:?}")]
    DuplicateObservation { unit: String, time: String },

    #[error("incomplete grid: no observation for unit {unit:?} at time {time:?}")]
    IncompleteGrid { unit: String, time: String },

    #[error("no treated units in panel")]
    NoTreatedUnits,

    #[error("all units are treated; at least one control unit is required")]
    NoControlUnits,

    #[error("treatment starts in the first period; at least one pre-treatment period is required")]
    NoPreTreatmentPeriod,

    #[error("inconsistent covariate dimension: expected {expected}, found {found}")]
    CovariateDimension { expected: usize, found: usize },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("rank {r} exceeds smallest dimension {min_dim}")]
    RankTooLarge { r: usize, min_dim: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("order conditions fail for r = {r}: {detail}")]
    OrderCondition { r: usize, detail: String },

    #[error("loading degeneracy: reciprocal condition number {rcond:e} below threshold")]
    LoadingDegeneracy { rcond: f64 },

    #[error("singular normalization matrix in variance estimate")]
    SingularNormalization,

    #[error("singular Gram matrix")]
    SingularGram,

    #[error("bootstrap degeneracy: draw {draw} failed twice in a row")]
    BootstrapDegeneracy { draw: usize },

    #[error("simulation failure rate exceeded: {failures} of {reps} replications failed")]
    FailureRateExceeded { failures: usize, reps: usize },

    #[error("singular value decomposition failed to converge")]
    SvdFailure,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category used in CLI error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Schema(_) | Error::Csv(_) | Error::Json(_) => "schema",
            Error::DuplicateObservation { .. }
            | Error::IncompleteGrid { .. }
            | Error::NoTreatedUnits
            | Error::NoControlUnits
            | Error::NoPreTreatmentPeriod
            | Error::CovariateDimension { .. }
            | Error::InvalidPanel(_) => "panel",
            Error::NonFinite(_) | Error::InvalidArgument(_) | Error::RankTooLarge { .. } => "input",
            Error::OrderCondition { .. } => "order_condition",
            Error::LoadingDegeneracy { .. }
            | Error::SingularNormalization
            | Error::SingularGram
            | Error::BootstrapDegeneracy { .. }
            | Error::SvdFailure => "degeneracy",
            Error::FailureRateExceeded { .. } => "failure_rate",
            Error::Io(_) => "io",
        }
    }

    /// Process exit status for the CLI.
    pub fn exit_status(&self) -> u8 {
        match self.code() {
            "degeneracy" => 3,
            "failure_rate" => 4,
            _ => 2,
        }
    }
}
