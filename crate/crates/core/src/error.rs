use std::io;

use crate::factor::Factor;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("invalid metadata: {0}")]
    Metadata(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("layer {layer} out of range (layers: {count})")]
    LayerOutOfRange { layer: usize, count: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("duplicate id {0:?}")]
    Duplicate(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate {what}: norm {norm:e} below tolerance")]
    Degenerate { what: String, norm: f64 },

    #[error("zero-variance column {0}")]
    ZeroVariance(String),

    #[error("singular design: predictors {a} and {b} are collinear")]
    Singular { a: Factor, b: Factor },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prediction for record {0:?}")]
    MissingPrediction(String),

    #[error("family {family:?} lacks a polarity-{polarity} fragment for slot {slot}")]
    MissingFragment {
        family: String,
        slot: String,
        polarity: u8,
    },

    #[error("k = {k} exceeds the {n} available pairs")]
    TooFewPairs { k: usize, n: usize },

    #[error("fold {0} has no held-out pairs")]
    EmptyFold(usize),

    #[error("intervention hook unavailable: {0}")]
    HookUnavailable(String),

    #[error("direction is not unit length (norm {0})")]
    NonUnit(f64),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
