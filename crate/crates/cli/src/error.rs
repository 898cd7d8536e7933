use std::fmt;

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or output directory: exit 1.
    Usage(String),
    /// Unreadable or inconsistent data: exit 2, or 3 for a non-finite loss.
    Data(guidecap::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(guidecap::Error::NonFinite { .. }) => 3,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<guidecap::Error> for CliError {
    fn from(e: guidecap::Error) -> Self {
        CliError::Data(e)
    }
}

/// Wraps an I/O failure on `path` as a data error.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(guidecap::Error::Io { path: path.to_path_buf(), source: e })
}
