use std::path::PathBuf;

use atn_core::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] atn_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "config" => 2,
            "numerical" => 4,
            _ => 3,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => "config",
                ErrorClass::Data => "data",
                ErrorClass::Numerical => "numerical",
            },
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
            _ => "data",
        }
    }

    /// Single-line JSON, printed on stdout when a command fails.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.class(),
            "exit_code": self.exit_code(),
            "message": self.to_string().replace('\n', " "),
        })
        .to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
