use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular or not positive definite: {0}")]
    Singular(&'static str),

    #[error("probability out of range: {0}")]
    InvalidProbability(f64),

    #[error("mixture weights are all zero")]
    ZeroWeights,

    #[error("intensity grids are incompatible")]
    GridMismatch,

    #[error("enumeration problem too large ({tracks} tracks + {measurements} measurements > {limit})")]
    ProblemTooLarge {
        tracks: usize,
        measurements: usize,
        limit: usize,
    },

    #[error("undetected-target intensity is zero at the measurement")]
    ZeroIntensity,

    #[error("operation requires a grid intensity: {0}")]
    NotGrid(&'static str),

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("kernel cache {path}: {reason}")]
    KernelCache { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
