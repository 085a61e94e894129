use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] put_core::Error),
    #[error("{key}: {message}")]
    Setting { key: String, message: String },
    #[error("{path}:{line}: {message}")]
    ConfigFile {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("missing required setting {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Machine-parsable prefix for `error[kind]: ...`.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Setting { .. } | CliError::ConfigFile { .. } | CliError::Missing(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
