use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {}: run the upstream subcommand first", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Core(#[from] difinv::Error),

    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 config, 3 missing artifact, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Core(e) => match e {
                difinv::Error::Config(_) | difinv::Error::Dimension(_) => 2,
                difinv::Error::NumericalDomain(_) | difinv::Error::Solver(_) => 4,
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}

pub fn config<S: Into<String>>(msg: S) -> CliError {
    CliError::Config(msg.into())
}

pub type Result<T> = std::result::Result<T, CliError>;
