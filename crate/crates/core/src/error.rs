use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate code prior: p = 0 gives a zero normalization factor")]
    DegeneratePrior,

    #[error("cannot l2-normalize a vector with near-zero norm ({norm:e})")]
    ZeroVector { norm: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty index")]
    EmptyIndex,

    #[error("unsatisfiable split protocol: {0}")]
    Unsatisfiable(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("query {query} has no relevant gallery item")]
    NoRelevant { query: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

/// Reading fixed-width little-endian fields from a byte stream; a short read is
/// reported as a truncated file rather than a bare I/O error.
pub(crate) mod wire {
    use std::io::{self, Read};

    use super::{Error, Result};

    fn fill<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
        r.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
            _ => Error::Io(e),
        })
    }

    pub fn magic<R: Read>(r: &mut R, expected: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        fill(r, &mut buf, "magic")?;
        if &buf != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    macro_rules! reader {
        ($name:ident, $ty:ty) => {
            pub fn $name<R: Read>(r: &mut R, what: &str) -> Result<$ty> {
                let mut buf = [0u8; std::mem::size_of::<$ty>()];
                fill(r, &mut buf, what)?;
                Ok(<$ty>::from_le_bytes(buf))
            }
        };
    }

    reader!(u8, u8);
    reader!(u16, u16);
    reader!(u32, u32);
    reader!(u64, u64);
    reader!(f32, f32);
    reader!(f64, f64);

    pub fn version<R: Read>(r: &mut R, supported: u32) -> Result<()> {
        let v = u32(r, "version")?;
        if v != supported {
            return Err(Error::Format(format!("unsupported version {v}, expected {supported}")));
        }
        Ok(())
    }

    /// Fails unless the stream is exhausted.
    pub fn end<R: Read>(r: &mut R) -> Result<()> {
        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after last record".into())),
        }
    }
}
