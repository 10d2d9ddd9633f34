use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape incompatibility between tensors or between a layer and its input.
    /// Carries both shapes so the message is actionable without a debugger.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value or combination (bad key, out-of-range
    /// hyperparameter, batch size 1 under batch norm, N > K-1, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward/backward op produced or received non-finite values.
    /// `origin` identifies the op; training treats this as divergence.
    #[error("non-finite values in {origin}{}", detail.as_deref().map(|d| format!(": {d}")).unwrap_or_default())]
    NonFinite {
        origin: &'static str,
        detail: Option<String>,
    },

    /// Internal invariant broken (missing forward cache, window bookkeeping
    /// bug). Always indicates a library defect, never bad user input.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    /// Dataset / checkpoint / config file parse failures.
    #[error("parse error in {path} at byte {offset}: {what}")]
    Parse {
        path: String,
        offset: u64,
        what: String,
    },

    /// A property check run by the verification suite failed.
    #[error("verification failure [{module}/{op}]: {what}")]
    Verify {
        module: &'static str,
        op: &'static str,
        what: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
