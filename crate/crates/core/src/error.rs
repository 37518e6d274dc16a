use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Caller-supplied data does not match the shape the operation expects.
    #[error("input error: {0}")]
    Input(String),

    /// Not even one expert fits in the free device memory.
    #[error("capacity error: expert does not fit in device memory ({expert_bytes} bytes per expert, {free_bytes} bytes free)")]
    Capacity { expert_bytes: u64, free_bytes: u64 },

    /// Instance too large for an exhaustive method.
    #[error("size error: {what} supports at most {max} experts, got {got}")]
    Size {
        what: &'static str,
        max: usize,
        got: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
