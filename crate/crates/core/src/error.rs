use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes or array lengths are incompatible.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Bytes or text could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// A point refers to a voxel that the grid does not contain.
    #[error("point {point}: voxel key {key:?} not present in grid")]
    MissingVoxel { point: usize, key: [i64; 3] },

    /// Failure inside a per-scale stage of the pipeline.
    #[error("scale {scale}: {source}")]
    AtScale { scale: usize, source: Box<Error> },

    /// Operands were recorded on two different gradient tapes.
    #[error("tensors belong to different gradient tapes")]
    TapeMismatch,

    /// Configuration problems, all collected before giving up.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn len_mismatch(op: &'static str, lhs: usize, rhs: usize) -> Self {
        Error::Shape {
            op,
            lhs: vec![lhs],
            rhs: vec![rhs],
        }
    }

    pub(crate) fn at_scale(self, scale: usize) -> Self {
        Error::AtScale {
            scale,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
