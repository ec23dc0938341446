use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand extents disagree (matmul inner dims, elementwise shapes, conv geometry).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside an operation's mathematical domain, e.g. log of a nonpositive value.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A tensor or ring has the wrong element count for its declared layout.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity produced from finite inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Padding or checkpoint built for a different model configuration.
    #[error("compatibility error: expected fingerprint {expected:016x}, found {found:016x}")]
    Compatibility { expected: u64, found: u64 },

    /// Malformed or truncated file.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error("missing file referenced by manifest: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
