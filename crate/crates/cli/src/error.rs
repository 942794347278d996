use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] visitlift::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input `{}`", .0.display())]
    MissingInput(PathBuf),

    #[error("{}:{line}: {msg}", path.display())]
    Schema { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn schema(path: &Path, line: usize, msg: impl ToString) -> Self {
        CliError::Schema {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        }
    }

    /// 2 configuration, 3 data, 4 statistical degeneracy.
    pub fn exit_code(&self) -> i32 {
        use visitlift::Error as E;
        match self {
            CliError::Config(_) | CliError::MissingInput(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::Degenerate(_)) | CliError::Core(E::TooFewSamples { .. }) => 4,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        use visitlift::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Schema { .. } => "schema",
            CliError::Io { .. } => "io",
            CliError::Core(E::Data(_)) => "data",
            CliError::Core(E::DuplicatePid(_)) => "duplicate_pid",
            CliError::Core(E::UnknownPid(_)) => "unknown_pid",
            CliError::Core(E::Degenerate(_)) => "degenerate",
            CliError::Core(E::TooFewSamples { .. }) => "too_few_samples",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorJson {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("error json")
    }
}
