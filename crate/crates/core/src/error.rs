use thiserror::Error;

use crate::refine::ToyChain;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite after {attempts} jitter attempts")]
    NotPositiveDefinite { attempts: usize },

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("non-finite value in input")]
    NonFiniteInput,

    #[error("channel statistics are empty")]
    EmptyStats,

    #[error("rank {rank} exceeds min(rows, cols) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("entry ({row}, {col}) is not exactly +1 or -1")]
    NonBinaryEntry { row: usize, col: usize },

    #[error("padding bits set in row {row}")]
    CorruptPadding { row: usize },

    #[error("chain has no tunable layers")]
    NoTunableLayers,

    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        checkpoint: Box<ToyChain>,
    },

    #[error("solver diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("rank must be at least 1")]
    InvalidRank,

    #[error("unsupported method: {0}")]
    UnsupportedMethod(String),

    #[error("salient column count {c} invalid (limit {limit})")]
    InvalidSalientCount { c: usize, limit: usize },

    #[error("target {target} bpw is too small for a {n}x{m} layer")]
    TargetTooSmall { target: f64, n: usize, m: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("layer `{name}`: {inner}")]
    Layer { name: String, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn in_layer(self, name: &str) -> Self {
        Error::Layer {
            name: name.to_string(),
            inner: Box::new(self),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or config).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Diverged { .. }
            | Error::ZeroMatrix => true,
            Error::Layer { inner, .. } => inner.is_numerical(),
            _ => false,
        }
    }
}
