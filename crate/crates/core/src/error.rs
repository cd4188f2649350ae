use std::path::PathBuf;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A binary or text file did not parse. `field` names the offending
    /// part of the layout (e.g. "bad magic", "truncated payload").
    #[error("{format} format error: {field}")]
    Format { format: FileFormat, field: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("config line {line}: key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        breakdown: LossBreakdown,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    FeatureMap,
    Checkpoint,
    Image,
    Report,
}

impl std::fmt::Display for FileFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FileFormat::FeatureMap => "feature-map",
            FileFormat::Checkpoint => "checkpoint",
            FileFormat::Image => "image",
            FileFormat::Report => "report",
        })
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(format: FileFormat, field: impl Into<String>) -> Self {
        Error::Format {
            format,
            field: field.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable, machine-parsable error category used by the CLI and the C ABI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Format { format, .. } => match format {
                FileFormat::FeatureMap => "feature-map-format",
                FileFormat::Checkpoint => "checkpoint-format",
                FileFormat::Image => "image-format",
                FileFormat::Report => "report-format",
            },
            Error::Manifest { .. } => "manifest",
            Error::Config { .. } => "config",
            Error::NonFiniteLoss { .. } => "training-diverged",
            Error::Io { .. } => "io",
        }
    }
}
