use thiserror::Error;

/// Errors surfaced by dataset construction, model fitting, estimation, and
/// inference. Variants map onto CLI exit codes: validation errors exit 2,
/// convergence failures exit 3, infeasible jackknife exits 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("arm column contains non-binary value `{0}`")]
    NonBinaryArm(String),
    #[error("cluster `{0}` has rows in both arms")]
    ArmVariesWithinCluster(String),
    #[error("negative observed time {time} in cluster `{cluster}`")]
    NegativeTime { cluster: String, time: f64 },
    #[error("dataset contains only arm {0}; both arms are required")]
    SingleArmDataset(u8),
    #[error("dataset has {0} clusters; at least 2 are required")]
    TooFewClusters(usize),
    #[error("cluster `{0}` has no subjects")]
    EmptyCluster(String),
    #[error("arm {0} has no events")]
    NoEventsInArm(u8),
    #[error("invalid value in column `{column}`: {value}")]
    InvalidValue { column: String, value: String },

    #[error("unknown term `{0}` in model formula")]
    UnknownTerm(String),

    #[error("no events of the fitted role in arm {arm}")]
    NoEventsInRole { arm: u8 },
    #[error("model fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("information matrix is singular (collinear covariates?)")]
    SingularInformation,

    #[error("no subjects in arm {0}")]
    NoSubjectsInArm(u8),
    #[error("oracle fitted for arm {fitted} but asked about arm {asked}")]
    OracleArmMismatch { fitted: u8, asked: u8 },
    #[error("ratio effect undefined: reference survival is zero")]
    RatioDenominatorZero,
    #[error("requested time {tau} is beyond the curve grid ending at {grid_end}")]
    TauBeyondGrid { tau: f64, grid_end: f64 },

    #[error("leave-one-out of cluster `{0}` is infeasible: {1}")]
    LeaveOneOutInfeasible(String, String),
    #[error("jackknife requires at least 3 clusters, got {0}")]
    TooFewClustersForJackknife(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("simulation study aborted: {failed} of {total} replications failed (first error: {first})")]
    SystematicRepFailure {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } | Error::SingularInformation => 3,
            Error::LeaveOneOutInfeasible(..) | Error::TooFewClustersForJackknife(_) => 4,
            _ => 2,
        }
    }
}
