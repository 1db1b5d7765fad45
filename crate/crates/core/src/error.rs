use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("ellipse fit error: {0}")]
    Fit(String),
    #[error("measurement failure: {0}")]
    Measurement(String),
    #[error("extraction error: {0}")]
    Extraction(String),
    #[error("standardization error: {0}")]
    Standardize(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Argument(_) => ErrorClass::Config,
            Error::Numerical(_) | Error::NonConvergence(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
