use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Capacity(String),

    /// A simulator self-check failed.
    #[error("internal invariant breach: {0}")]
    Invariant(String),

    /// `verify` found violations in a trace.
    #[error("{0} violation(s) found")]
    Verification(usize),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Verification(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<moe_offload::Error> for CliError {
    fn from(err: moe_offload::Error) -> Self {
        match err {
            moe_offload::Error::Capacity { .. } => CliError::Capacity(err.to_string()),
            moe_offload::Error::Io(source) => CliError::Io {
                context: "i/o".into(),
                source,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}
