use std::path::PathBuf;

use thiserror::Error;

/// Which side of a segmentation collapsed to an empty region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Inside => f.write_str("inside"),
            Region::Outside => f.write_str("outside"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file: field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate region: {0} of the level set is empty")]
    DegenerateRegion(Region),

    #[error("collapsed soft mask: {0} weight below epsilon")]
    CollapsedMask(Region),

    #[error("acwe failed at iteration {iteration}: {source}")]
    AcweIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("training aborted after {0} consecutive collapsed steps")]
    Diverged(usize),

    #[error("loss is not finite")]
    NonFiniteLoss,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { field: field.into(), message: message.into() }
    }

    /// Short stable identifier, used by the CLI for machine-parsable errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::PayloadSize { .. } => "payload_size",
            Error::NonFinite { .. } => "non_finite",
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateRegion(_) => "degenerate_region",
            Error::CollapsedMask(_) => "collapsed_mask",
            Error::AcweIteration { .. } => "acwe_iteration",
            Error::Json(_) => "json",
            Error::Diverged(_) => "diverged",
            Error::NonFiniteLoss => "non_finite_loss",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
