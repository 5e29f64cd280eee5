use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or out-of-range configuration. `key` names the offending setting.
    #[error("configuration error ({key}): {message}")]
    Config { key: String, message: String },

    /// An iterative method failed to converge.
    #[error("numerical failure in {what}: {detail}")]
    Numerical { what: &'static str, detail: String },

    #[error("blow-up in chain {chain} at step {step}: |x|_inf = {sup_norm:e} exceeds {cap:e}")]
    BlowUp {
        chain: u64,
        step: u64,
        sup_norm: f64,
        cap: f64,
    },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("ill-conditioned system: condition number {condition:e} exceeds {limit:e}")]
    IllConditioned { condition: f64, limit: f64 },

    #[error("empty shell: no samples with |g - {r}| <= {eps}")]
    EmptyShell { r: f64, eps: f64 },

    #[error("missing density estimate v_{0}")]
    MissingDensity(usize),

    #[error("ensemble file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed ensemble header: {0}")]
    Header(#[from] serde_json::Error),
}
