use thiserror::Error;

use crate::model::Pixel;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("pixel ({}, {}) lies outside the {strip} strip", .pixel.0, .pixel.1)]
    OutOfBounds { strip: &'static str, pixel: Pixel },

    #[error("pixel ({}, {}) appears twice in the {strip} strip", .pixel.0, .pixel.1)]
    DuplicatePixel { strip: &'static str, pixel: Pixel },

    #[error("frame {shot} has {count} photocounts, above the bound {bound}")]
    CountExceedsBound { shot: u64, count: usize, bound: usize },

    #[error("no frames supplied")]
    NoFrames,

    #[error("POVM entry T({c}, {n}) has estimated relative error {rel_error:e}")]
    NumericalInstability { c: usize, n: usize, rel_error: f64 },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("log-likelihood decreased by {drop:e} at iteration {iteration}")]
    NonMonotoneLikelihood { iteration: usize, drop: f64 },

    #[error("normalization drifted by {drift:e} during an EM step")]
    NormalizationDrift { drift: f64 },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("correlated-area fit failed: {0}")]
    FitFailure(String),

    #[error("truncation tail mass {0:e} exceeds 1e-6")]
    TailMass(f64),

    #[error("intensity moment <W_s^{j} W_i^{k}> disagrees between routes: {a} vs {b}")]
    InternalMismatch { j: usize, k: usize, a: f64, b: f64 },

    #[error("E_{k} stays negative up to thermal mean {limit:e}")]
    NoConcealment { k: usize, limit: f64 },

    #[error("zero variance in the {0} marginal")]
    ZeroVariance(&'static str),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid-parameter",
            Error::OutOfBounds { .. } | Error::DuplicatePixel { .. } => "invalid-frame",
            Error::CountExceedsBound { .. } => "count-exceeds-bound",
            Error::NoFrames => "no-frames",
            Error::NumericalInstability { .. } => "numerical-instability",
            Error::ModelMismatch(_) => "model-mismatch",
            Error::NonMonotoneLikelihood { .. } => "non-monotone-likelihood",
            Error::NormalizationDrift { .. } => "normalization-drift",
            Error::DivisionByZero(_) => "division-by-zero",
            Error::FitFailure(_) => "fit-failure",
            Error::TailMass(_) => "tail-mass",
            Error::InternalMismatch { .. } => "internal-mismatch",
            Error::NoConcealment { .. } => "no-concealment",
            Error::ZeroVariance(_) => "zero-variance",
            Error::Config { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
