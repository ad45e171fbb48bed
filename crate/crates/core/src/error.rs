use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 4]),

    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        len: usize,
        expected: usize,
        shape: [usize; 4],
    },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("bit-width {0} outside supported range 2..=8")]
    InvalidBits(u32),

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("granularity mismatch: {0}")]
    Granularity(String),

    #[error("reference vector has zero norm")]
    ZeroReference,

    #[error("sample has zero variance, moment undefined")]
    ZeroVariance,

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid tensor file: {0}")]
    Format(String),

    #[error("kernel outputs diverge: max relative deviation {deviation:e} exceeds {tolerance:e}")]
    Divergence { deviation: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}
