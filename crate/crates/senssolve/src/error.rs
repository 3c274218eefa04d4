use thiserror::Error;

/// Errors produced while validating designs or running analyses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: no data records found")]
    EmptyInput,

    #[error("required column(s) missing from header: {0}")]
    MissingColumns(String),

    #[error("line {line}: {msg}")]
    BadRecord { line: usize, msg: String },

    #[error("block {0:?} has no treated unit")]
    MissingTreated(String),

    #[error("block {0:?} has more than one treated unit")]
    MultipleTreated(String),

    #[error("block {0:?} contains a non-finite outcome")]
    NonFiniteOutcome(String),

    #[error("block {0:?} has fewer than two units")]
    StratumTooSmall(String),

    #[error("stratum statistic needs at least two values")]
    LengthTooSmall,

    #[error("gamma must satisfy gamma >= 1, got {0}")]
    InvalidGamma(f64),

    #[error("alpha must lie in (0, 0.5], got {0}")]
    InvalidAlpha(f64),

    #[error("total worst-case variance is zero; no randomness remains")]
    DegenerateVariance,

    #[error("assignment probabilities in stratum {0} do not form a distribution")]
    ProbabilityRowInvalid(usize),

    #[error("interval restriction infeasible in stratum {index}: need n <= kappa <= n*gamma, got n={n}, kappa={kappa}, gamma={gamma}")]
    InfeasibleRestriction {
        index: usize,
        n: usize,
        kappa: f64,
        gamma: f64,
    },

    #[error("Q matrix is rank deficient")]
    RankDeficientQ,

    #[error("leverage of row {0} is at or above one")]
    LeverageOne(usize),

    #[error("need more strata than Q columns: B={b}, p={p}")]
    TooFewStrata { b: usize, p: usize },

    #[error("outcomes are not binary")]
    NonBinaryOutcome,

    #[error("N*tau0 = {0} is not within 1e-9 of an integer in [-N, N]")]
    NonIntegerTarget(f64),

    #[error("no potential-outcome completion attains the effect total {0}")]
    InfeasibleTau0(i64),

    #[error("worst-case p-value stays below alpha for all gamma up to gamma_max = {0}")]
    NoCrossingBelowMax(f64),

    #[error("more than 1% of reference draws had a degenerate standard error")]
    DegenerateReference,

    #[error("unknown scenario label {0:?}")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
