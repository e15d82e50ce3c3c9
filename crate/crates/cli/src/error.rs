// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration; the message starts with the field path.
    #[error("config error at {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Numerical {
        context: String,
        #[source]
        source: sdemoments::Error,
    },

    #[error("io error: {0}")]
    Io(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Wraps a library error raised while running `context`.
    ///
    /// Argument errors are configuration problems; I/O errors stay I/O errors.
    pub fn numerical(context: &str, e: sdemoments::Error) -> Self {
        use sdemoments::Error as E;
        match e {
            E::InvalidArgument(msg) => CliError::Config(format!("{context}: {msg}")),
            E::Capacity(msg) => CliError::Config(format!("{context}: capacity exceeded: {msg}")),
            E::Io(io) => CliError::Io(format!("{context}: {io}")),
            E::Csv(csv) => CliError::Io(format!("{context}: {csv}")),
            source => CliError::Numerical { context: context.to_string(), source },
        }
    }

    /// Process exit status: 2 for configuration, 3 for numerical failure, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
