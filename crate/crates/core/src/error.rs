use alloc::string::String;

/// Errors raised by the model library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid shape {rows}x{cols} for {len} values")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("no gradient reached parameter `{0}`")]
    MissingGradient(String),
    #[error("interface layout expects {expected} values, got {got}")]
    Layout { expected: usize, got: usize },
    #[error("log coverage error: {0}")]
    Coverage(String),
    #[error("negative-rate target {target} is infeasible: {reason}")]
    InfeasibleTarget { target: f64, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = core::result::Result<T, Error>;
