use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate rotation: gaussian {index} has a zero-norm quaternion")]
    DegenerateRotation { index: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("unknown layout {0:?} (expected grid, random-blob or occlusion-pair)")]
    UnknownLayout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range or already pruned")]
    PruneIndex { index: usize },

    #[error("quantizer for {attribute} has q_m = {q_m} <= 1; re-warm q_m before projecting")]
    IllPosedProjection { attribute: &'static str, q_m: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate statistics: attribute {0} has zero variance")]
    ZeroVariance(String),

    #[error("zero rendering sensitivity for attribute {0}")]
    ZeroSensitivity(String),

    #[error("infeasible budget: {budget} < {minimum}")]
    InfeasibleBudget { budget: f64, minimum: f64 },

    #[error("non-finite gradient in block {0}")]
    NonFiniteGradient(&'static str),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("unsupported bit-width {0} (max 16)")]
    UnsupportedBitWidth(u32),

    #[error("unknown ablation variant {0:?}")]
    UnknownAblation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
