use thiserror::Error;

/// Errors produced by construction, validation, and numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: dimension mismatch, expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    DimMismatch {
        context: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },

    #[error("{context}: length mismatch, expected {expected}, got {got}")]
    LenMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{context}: non-finite value at flat index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("matrix dimensions {rows}x{cols} must both be positive")]
    ZeroDim { rows: usize, cols: usize },

    #[error("tensor shape {rows}x{cols} does not match data length {len}")]
    ShapeData { rows: usize, cols: usize, len: usize },

    #[error("convolution kernel must have odd dimensions, got {rows}x{cols}")]
    EvenKernel { rows: usize, cols: usize },

    #[error("embedding width {n_y} does not match declared patch grid {p_h}x{p_w}")]
    PatchGrid { n_y: usize, p_h: usize, p_w: usize },

    #[error("normalization target needs sigma2 > 0 and epsilon > 0, got sigma2 = {sigma2}, epsilon = {epsilon}")]
    BadNormTarget { sigma2: f64, epsilon: f64 },

    #[error("projection certificate rejects degenerate input rows (constant, or fewer than 2 entries)")]
    DegenerateRow,

    #[error("attention head list is empty")]
    NoHeads,

    #[error("feedforward layer list is empty")]
    NoLayers,

    #[error("dataset has no pairs")]
    EmptyDataset,

    #[error("inconsistent model: {0}")]
    Inconsistent(String),

    #[error("trainable parameter count {count} exceeds the cap of {cap}")]
    ParamCap { count: usize, cap: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite loss while probing gradient coordinate {index}")]
    NonFiniteLoss { index: usize },

    #[error("time stepping needs at least one step")]
    NoSteps,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
