//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by panel validation, estimation kernels, estimators,
/// inference, simulation, and benchmarking.
#[derive(Debug, Clone, Error)]
pub enum Error {
    // ---- panel validation -------------------------------------------------
    /// A unit is missing one or more unit-time cells.
    #[error("unbalanced panel: unit '{unit}' has {got} records, expected {expected}")]
    UnbalancedPanel {
        unit: String,
        got: usize,
        expected: usize,
    },
    /// Treatment switches from 1 back to 0 within a unit.
    #[error("treatment reversal for unit '{unit}' at time {time}")]
    TreatmentReversal { unit: String, time: u32 },
    /// A unit is already treated in the first observed period.
    #[error("unit '{unit}' is treated at the first observed period")]
    TreatedAtBaseline { unit: String },
    /// Covariates vary across records of the same unit.
    #[error("covariate drift for unit '{unit}': column {column} varies over time")]
    CovariateDrift { unit: String, column: usize },
    /// Treatment status differs across units of one cluster at some period.
    #[error("mixed treatment within cluster '{cluster}' at time {time}")]
    MixedClusterTreatment { cluster: String, time: u32 },
    /// Generic malformed input (empty record list, bad time index, ...).
    #[error("invalid panel input: {0}")]
    InvalidPanel(String),

    // ---- cohorts ----------------------------------------------------------
    /// No unit ever receives treatment; cohort-based estimators are undefined.
    #[error("no treated units: cohort support is empty")]
    NoTreatedUnits,
    /// A cohort-share window excludes every cohort.
    #[error("empty cohort window: no cohort satisfies the predicate")]
    EmptyWindow,

    // ---- estimation kernels -----------------------------------------------
    /// Every design column was dropped for collinearity.
    #[error("rank zero design: no usable columns remain")]
    RankZero,
    /// Cluster-robust variance needs at least two clusters.
    #[error("cluster-robust variance undefined with {0} cluster(s)")]
    FewerClustersThanTwo(usize),
    /// Alternating demeaning failed to converge.
    #[error("fixed-effect absorption did not converge after {0} sweeps")]
    NonConvergence(usize),
    /// Logistic fit with only one response class.
    #[error("logistic fit requires both classes; observed a single class")]
    SingleClass,
    /// Multinomial fit with a class that has no observations.
    #[error("multinomial fit: class {0} has no observations")]
    MissingClass(usize),

    // ---- estimators ---------------------------------------------------------
    /// No control units available for a (g, t) cell.
    #[error("empty control set for cohort {g} at time {t}")]
    EmptyControlSet { g: u32, t: u32 },
    /// Fitted propensities exceed the overlap bound.
    #[error("overlap violation for cohort {g} at time {t}: max fitted propensity {max_pi:.6} > 1 - {eps}")]
    OverlapViolation { g: u32, t: u32, max_pi: f64, eps: f64 },
    /// Interaction-weighted estimator needs a reference cohort.
    #[error("no reference cohort: need a never-treated group or at least two cohorts")]
    NoReferenceCohort,
    /// No cohort contributes to the requested event time.
    #[error("no cohort contributes at event time {0}")]
    NoContributingCohort(i32),
    /// Two-stage first stage lacks untreated support.
    #[error("insufficient untreated support: {0}")]
    InsufficientUntreatedSupport(String),
    /// Two-stage second stage has no treated rows.
    #[error("no treated rows remain for the second-stage regression")]
    NoTreatedRows,
    /// Requested event time has no observations.
    #[error("no observations at event time {0}")]
    EmptyEventTime(i32),
    /// A requested treatment cell is absent from the fit.
    #[error("treatment cell (g={g}, t={t}) is missing from the fit")]
    MissingCell { g: u32, t: u32 },
    /// Mundlak marginalization cannot target negative event times.
    #[error("negative event time {0} unsupported by this estimator")]
    NegativeEventTime(i32),

    // ---- aggregation & inference --------------------------------------------
    /// No cohort is feasible for the requested event time weights.
    #[error("no feasible cohort for event time {0}")]
    NoFeasibleCohort(i32),
    /// Every weighted cell is missing from the effect list.
    #[error("all weighted cells are missing; nothing to aggregate")]
    AllCellsMissing,
    /// Bootstrap needs at least two clusters.
    #[error("bootstrap requires at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    /// Every bootstrap replicate failed.
    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),

    // ---- simulation & benchmark ----------------------------------------------
    /// Unknown scenario preset name.
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // ---- i/o -------------------------------------------------------------------
    /// CSV or file-format violation.
    #[error("schema violation: {0}")]
    Schema(String),
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
