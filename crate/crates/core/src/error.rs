use std::path::PathBuf;

use thiserror::Error;

use crate::refine::RefineReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("refinement diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        report: Box<RefineReport>,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed file {}: {reason}", .path.display())]
    MalformedFile { path: PathBuf, reason: String },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unsupported manifest version {0}")]
    UnsupportedVersion(u32),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short identifier used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptySelection(_) => "empty_selection",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::MissingFile(_) => "missing_file",
            Error::MalformedFile { .. } => "malformed_file",
            Error::MalformedManifest(_) => "malformed_manifest",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Io(_) => "io",
        }
    }
}
