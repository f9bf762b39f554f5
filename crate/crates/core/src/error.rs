use thiserror::Error;

/// Errors produced by the makeup engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("region '{0}' is empty")]
    EmptyRegion(String),

    #[error("unknown region '{0}'")]
    UnknownRegion(String),

    #[error("missing region '{0}'")]
    MissingRegion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("backend error at step {step}: {source}")]
    BackendStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend error: {message}")]
    Backend { message: String, retryable: bool },

    #[error("backend does not support attention hooks: {0}")]
    Unsupported(String),

    #[error("region '{region}': {source}")]
    InRegion {
        region: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("job cancelled")]
    Cancelled,

    #[error("job exceeded its time budget")]
    Timeout,

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn in_region(region: &str, source: Error) -> Self {
        Error::InRegion {
            region: region.to_string(),
            source: Box::new(source),
        }
    }

    pub(crate) fn at_stage(stage: &'static str, source: Error) -> Self {
        match source {
            // Cancellation and timeouts are reported as-is.
            Error::Cancelled | Error::Timeout => source,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Name of the pipeline stage that failed, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// The innermost error, with stage/region/step annotations removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. }
            | Error::InRegion { source, .. }
            | Error::BackendStep { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self.root(), Error::Backend { retryable: true, .. })
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
