use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation (‖RᵀR − I‖∞ = {residual:e}, det = {det})")]
    NotARotation { residual: f64, det: f64 },

    #[error("rotation angle {angle} rad is outside the injectivity radius (< π)")]
    AngleOutOfRange { angle: f64 },

    #[error("time interval must be {expected}, got {dt} s")]
    InvalidInterval { dt: f64, expected: &'static str },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("query offset {offset} s is outside the segment [0, {dt}] s")]
    OffsetOutsideSegment { offset: f64, dt: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("knot times must be strictly increasing")]
    NonMonotoneTimes,

    #[error("time {t} s is outside the estimation window [{start}, {end}) s")]
    OutOfWindow { t: f64, start: f64, end: f64 },

    #[error("unknown {kind} sensor index {index}")]
    UnknownSensor { kind: &'static str, index: usize },

    #[error("invalid state configuration: {0}")]
    InvalidStateConfig(String),

    #[error("linear system is singular even after damping")]
    Singular,

    #[error("no overlapping timestamps between estimate and reference")]
    EmptyOverlap,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
