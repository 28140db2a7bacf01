use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container or file structure (names the offending chunk/field).
    #[error("format error: {0}")]
    Format(String),

    /// A codec or encoding this crate does not handle.
    #[error("unsupported format: {0}")]
    Unsupported(String),

    /// A caller violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// CTC label sequence cannot be emitted in the available frames.
    #[error("infeasible CTC instance: need at least {min_frames} frames, have {frames}")]
    Infeasible { min_frames: usize, frames: usize },

    /// A brute-force oracle was asked to enumerate too large a space.
    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    /// Training did not reach its contract.
    #[error("training failed: {0}")]
    TrainingFailed(String),

    /// Input data (manifest, config, corpus) failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A cross-domain matrix is missing cells.
    #[error("incomplete matrix, missing cells: {}", .0.join(", "))]
    IncompleteMatrix(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
