use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible extents.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A tensor was constructed with a shape that does not fit its data.
    InvalidShape { shape: Vec<usize>, len: usize },
    /// An op produced or received NaN/Inf.
    NonFinite { op: &'static str },
    /// Invalid configuration value or combination.
    Config(String),
    /// The requested operation is not defined for this attention variant.
    UnsupportedVariant(String),
    /// Parameters were built for a different variant than the config describes.
    VariantMismatch { expected: String, found: String },
    /// Malformed dataset file or inconsistent dataset.
    Data(String),
    /// Malformed checkpoint file.
    Checkpoint(String),
    Io { path: PathBuf, source: io::Error },
    /// Training produced a non-finite loss.
    NumericFailure {
        epoch: usize,
        batch: usize,
        loss: f64,
        trace: Vec<f64>,
    },
}

impl Error {
    /// I/O failure on `path`.
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::InvalidShape { shape, len } => {
                write!(f, "shape {shape:?} does not fit {len} values")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::UnsupportedVariant(msg) => write!(f, "unsupported variant: {msg}"),
            Error::VariantMismatch { expected, found } => {
                write!(f, "variant mismatch: config says {expected}, params are {found}")
            }
            Error::Data(msg) => write!(f, "dataset error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::NumericFailure {
                epoch,
                batch,
                loss,
                trace,
            } => write!(
                f,
                "non-finite loss {loss} at epoch {epoch}, batch {batch} (recent losses: {trace:?})"
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
