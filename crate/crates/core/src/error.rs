use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("volume data length {actual} does not match geometry ({expected} expected)")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("label {label} at index {index} exceeds the number of structures {num_structures}")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        num_structures: u8,
    },
    #[error("probability value {value} at index {index} outside [0, 1] or channel sum above 1")]
    InvalidProbability { index: usize, value: f64 },
    #[error("volume is constant; intensity normalization is undefined")]
    ConstantVolume,
    #[error("grid geometries differ: {0}")]
    GeometryMismatch(String),
    #[error("channel counts differ: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("volume variance below 1e-12; correlation is undefined")]
    DegenerateVariance,
    #[error("grid too small: every axis needs at least {0} samples")]
    GridTooSmall(usize),
    #[error("no atlases supplied")]
    EmptyAtlasSet,
    #[error("label {0} has an empty surface in at least one volume")]
    EmptySurface(u8),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("index {index} out of range for {len} atlases")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("bad magic bytes {0:?}, expected \"VVF1\"")]
    BadMagic([u8; 4]),
    #[error("header parse error: {0}")]
    HeaderParse(String),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
    #[error("kind `{kind}` cannot be stored as dtype `{dtype}`")]
    KindDtypeMismatch { kind: String, dtype: String },
    #[error("expected a `{expected}` volume, file holds `{found}`")]
    WrongKind { expected: String, found: String },
    // Causes are part of the message, so they are not exposed as sources.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("pipeline stage `{stage}` failed on {file}: {cause}")]
    Stage {
        stage: &'static str,
        file: String,
        cause: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, file: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            file: file.into(),
            cause: Box::new(self),
        }
    }
}
