//! Error type shared by every module in this crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the library.
///
/// The split mirrors how callers need to react: configuration and geometry
/// problems are caller bugs, data problems come from files or dimensions,
/// and numerical problems arise from degenerate inputs at run time.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Geometry that violates the head-model contract (sensor inside the
    /// sphere, source outside or at the center, non-unit orientation).
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// An argument outside its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrices whose shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A model that cannot be estimated from the data (collinear
    /// topographies, singular correlation target, rank-deficient fit).
    #[error("degenerate model: {0}")]
    Degenerate(String),

    /// Model order too large for the available degrees of freedom.
    #[error("model capacity exceeded: {0}")]
    Capacity(String),

    /// Numerical routine failed to converge or produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Text input that does not parse; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Parse error helper with a 1-based line number.
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
