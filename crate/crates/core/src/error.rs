use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {source}")]
    Header {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("payload size mismatch: header declares {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch between operands")]
    GeometryMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),

    #[error("invalid seeds: {0}")]
    InvalidSeeds(String),

    #[error("spinal canal not found: {0}")]
    CanalNotFound(String),

    #[error("disk plane fit failed: {0}")]
    DiskPlane(String),

    #[error("search region: {0}")]
    Region(String),

    #[error("balloon: {0}")]
    Balloon(String),

    #[error("degenerate two-gaussian fit: {0}")]
    DegenerateFit(String),

    #[error("no intersection of the gaussians between the means: {0}")]
    NoIntersection(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("no waist found: shape never splits into {0} components")]
    NoWaist(usize),

    #[error("morphology: {0}")]
    Morphology(String),

    #[error("anatomy: {0}")]
    Anatomy(String),

    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
