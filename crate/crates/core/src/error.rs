use thiserror::Error;

/// Failures reported by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("tail mass not negligible at quadrature radius {radius}")]
    TailNotNegligible { radius: f64 },
    #[error("Newton iteration for mean {target} failed after bracketing")]
    NewtonDiverged { target: f64 },
    #[error("convolution grid too coarse: Richardson estimate {estimate:e} exceeds tolerance {tol:e}")]
    GridTooCoarse { estimate: f64, tol: f64 },
    #[error("input is not mean-zero (mean = {mean:e})")]
    NotMeanZero { mean: f64 },
    #[error("linear solve failed: singular system")]
    SolverSingular,
    #[error("mean mismatch {diff:e} at snapshot time {time}")]
    MeanMismatch { time: f64, diff: f64 },
    #[error("value {value} outside free-energy table range [{lo}, {hi}]")]
    OutOfTableRange { value: f64, lo: f64, hi: f64 },
    #[error("unstable step: {reason}")]
    UnstableStep { reason: String },
    #[error("time step {dt:e} exceeds the explicit stability limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("H^-1 cross-check failed: primary {primary:e}, spectral {spectral:e}")]
    CrossCheckFailed { primary: f64, spectral: f64 },
    #[error("Monte Carlo relative standard error {rel_se:e} above limit {limit:e}")]
    McVarianceTooHigh { rel_se: f64, limit: f64 },
    #[error("conductance sample set is empty")]
    EmptyField,
    #[error("no replica hit the tube at N = {n}")]
    ZeroHits { n: usize },
    #[error("importance weights degenerate: effective sample size {ess:.1} below {threshold:.1}")]
    WeightDegeneracy { ess: f64, threshold: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    /// Short stable name, used by the command line front-end.
    pub fn name(&self) -> &'static str {
        match self {
            Error::TailNotNegligible { .. } => "TailNotNegligible",
            Error::NewtonDiverged { .. } => "NewtonDiverged",
            Error::GridTooCoarse { .. } => "GridTooCoarse",
            Error::NotMeanZero { .. } => "NotMeanZero",
            Error::SolverSingular => "SolverSingular",
            Error::MeanMismatch { .. } => "MeanMismatch",
            Error::OutOfTableRange { .. } => "OutOfTableRange",
            Error::UnstableStep { .. } => "UnstableStep",
            Error::CflViolation { .. } => "CFLViolation",
            Error::CrossCheckFailed { .. } => "CrossCheckFailed",
            Error::McVarianceTooHigh { .. } => "MCVarianceTooHigh",
            Error::EmptyField => "EmptyField",
            Error::ZeroHits { .. } => "ZeroHits",
            Error::WeightDegeneracy { .. } => "WeightDegeneracy",
            Error::InvalidParameter(_) => "InvalidParameter",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
