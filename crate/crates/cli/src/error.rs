use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] srd_core::Error),

    #[error("configuration error ({key}): {message}")]
    Config { key: String, message: String },

    #[error("{0}")]
    Io(String),

    #[error("replay mismatch: {0}")]
    Replay(String),

    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{what}: {e}"))
    }

    /// 2 configuration, 3 blow-up, 4 conditioning, 5 empty shell, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use srd_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Core(E::Config { .. }) => 2,
            CliError::Core(E::BlowUp { .. }) => 3,
            CliError::Core(E::IllConditioned { .. }) => 4,
            CliError::Core(E::EmptyShell { .. }) => 5,
            _ => 1,
        }
    }
}
