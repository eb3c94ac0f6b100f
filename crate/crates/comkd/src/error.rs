/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) do not line up.
    #[error("{op}: dimension mismatch, {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A scalar argument or input is outside its stated domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A feature row collapsed to (near-)zero norm; normalizing it would
    /// silently divide by nothing, so training aborts instead.
    #[error("degenerate feature: row {row} has norm {norm:e} (< 1e-12)")]
    DegenerateFeature { row: usize, norm: f32 },

    /// An internal contract that callers must uphold was broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Bad key, value, or constraint in a run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint or dataset file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
