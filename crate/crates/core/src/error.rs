use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operator received tensors whose extents do not satisfy its contract.
    #[error("{op}: shape mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: String,
        got: String,
    },

    /// A precondition that is not about a single axis.
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error(
        "input extents {height}x{width} are not divisible by 32; pad or crop the image to a multiple of 32"
    )]
    NotDivisible { height: usize, width: usize },

    #[error("non-finite value in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("checkpoint: bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint: truncated file ({context})")]
    Truncated { context: String },

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            axis,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or unreadable data rather than by
    /// programming mistakes. The CLI maps these to a dedicated exit code.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::NotDivisible { .. }
                | Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated { .. }
                | Error::Mismatch(_)
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::Image { .. }
        )
    }
}
