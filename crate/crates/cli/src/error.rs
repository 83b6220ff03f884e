use thiserror::Error;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("cannot parse config: {0}")]
    Parse(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] trails_core::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use trails_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Parse(_) => EXIT_VALIDATION,
            CliError::Checkpoint(_) | CliError::Io { .. } => EXIT_IO,
            CliError::Core(E::Diverged { .. } | E::NonFinite(_)) => EXIT_DIVERGED,
            CliError::Core(E::Io(_) | E::Idx { .. }) => EXIT_IO,
            CliError::Core(_) => EXIT_VALIDATION,
        }
    }
}
