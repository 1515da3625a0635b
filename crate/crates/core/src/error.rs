use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidSize(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    VersionMismatch(u32),

    #[error("duplicate activation key (layer {layer}, step {step})")]
    DuplicateKey { layer: u32, step: u32 },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("nonpositive depth {value} at pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f32 },

    #[error("every transformed point lies behind the camera")]
    AllBehindCamera,

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("region has no Dirichlet boundary: {0}")]
    UnanchoredRegion(String),

    #[error("edit out of frame: the warped object mask is empty")]
    EditOutOfFrame,

    #[error("missing activation entries: {0:?}")]
    MissingActivations(Vec<(u32, u32)>),

    #[error("denoiser does not support {0}")]
    Capability(&'static str),

    #[error("non-finite value in sampling trajectory at step {step}")]
    TrajectoryNaN { step: usize },

    #[error("missing samples: {0:?}")]
    MissingSamples(Vec<String>),

    #[error("rejection budget exhausted after {attempts} attempts ({accepted} samples accepted)")]
    RejectionBudget { attempts: usize, accepted: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by unreadable or malformed inputs rather than
    /// by the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedHeader(_)
                | Error::Truncated { .. }
                | Error::BadMagic { .. }
                | Error::VersionMismatch(_)
                | Error::DuplicateKey { .. }
                | Error::Image { .. }
                | Error::MissingSamples(_)
        )
    }
}
