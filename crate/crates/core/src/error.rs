//! Error type shared across the engine, attacks, defense, and data loaders.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure cases surfaced by this crate.
///
/// Variants carry enough context to point at the offending layer, file, or
/// config field without needing a backtrace.
#[derive(Debug)]
pub enum Error {
    /// A tensor or batch did not have the shape an operation required.
    Shape { context: String, detail: String },
    /// A forward or backward pass produced a NaN or infinity.
    NonFinite { context: String },
    /// A label was outside `0..num_classes`.
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    /// An operation that needs examples was handed an empty set.
    EmptyDataset { context: String },
    /// `batch_size` exceeds the number of available training examples.
    BatchTooLarge { batch_size: usize, available: usize },
    /// A subset of `requested` examples was asked from a smaller set.
    SubsetTooLarge { requested: usize, available: usize },
    /// A config value failed validation before any work started.
    InvalidConfig { context: String, detail: String },
    /// A file existed but its contents did not match the expected format.
    Format { path: PathBuf, detail: String },
    /// An underlying I/O failure, tagged with the path involved.
    Io { path: PathBuf, source: io::Error },
    /// Model-family generation aborted partway through.
    FamilyGeneration {
        completed_models: usize,
        completed_sets: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::NonFinite { context } => {
                write!(f, "non-finite value produced by {context}")
            }
            Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at example {index} is out of range for {num_classes} classes"
            ),
            Error::EmptyDataset { context } => write!(f, "{context}: dataset is empty"),
            Error::BatchTooLarge {
                batch_size,
                available,
            } => write!(
                f,
                "batch_size {batch_size} exceeds the {available} available training examples"
            ),
            Error::SubsetTooLarge {
                requested,
                available,
            } => write!(
                f,
                "requested subset of {requested} examples from a set of {available}"
            ),
            Error::InvalidConfig { context, detail } => {
                write!(f, "invalid config for {context}: {detail}")
            }
            Error::Format { path, detail } => {
                write!(f, "malformed file {}: {detail}", path.display())
            }
            Error::Io { path, source } => {
                write!(f, "I/O error on {}: {source}", path.display())
            }
            Error::FamilyGeneration {
                completed_models,
                completed_sets,
                detail,
            } => write!(
                f,
                "family generation aborted after {completed_models} models and \
                 {completed_sets} adversarial sets: {detail}"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
