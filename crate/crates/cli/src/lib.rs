//! Command implementations behind the `ricefield` binary.

pub mod config;
pub mod draws;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] ricefield::Error),

    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },

    /// The sampler stopped on a numerical failure; state was dumped.
    #[error("numerical abort: {msg} (diagnostic dump: {dump})")]
    Abort { msg: String, dump: String },
}

impl CliError {
    /// 1 for usage and input problems, 2 for numerical aborts.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Abort { .. } => 2,
            CliError::Core(ricefield::Error::Numeric(_) | ricefield::Error::Singular(_)) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File { path: path.display().to_string(), source }
}
