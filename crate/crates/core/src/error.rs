use std::fmt;

/// Errors raised anywhere in the library.
///
/// The variants line up with the command-line exit codes: contract and
/// config violations are caller mistakes, format errors come from
/// malformed files, numeric errors signal divergence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Contract { op, detail: detail.to_string() }
    }

    pub fn numeric(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Numeric { op, detail: detail.to_string() }
    }

    pub fn format(offset: u64, detail: impl fmt::Display) -> Self {
        Error::Format { offset, detail: detail.to_string() }
    }

    /// Process exit code for the `mcl` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract { .. } | Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Format { .. } => 4,
            Error::Numeric { .. } => 5,
        }
    }
}
