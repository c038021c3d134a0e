use std::path::PathBuf;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] quadranet_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: {detail} (byte offset {offset})")]
    Format {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("check failed: {0}")]
    Check(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(quadranet_core::Error::Infeasible { .. }) => EXIT_INFEASIBLE,
            AppError::Check(_) => EXIT_CHECK_FAILED,
            _ => EXIT_INPUT,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
