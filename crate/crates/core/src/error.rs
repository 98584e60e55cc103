use std::io;

use thiserror::Error;

/// Errors raised by the kernels, the network and the training harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that no operation rule can reconcile.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A precondition of an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// Dataset layout problems (missing masks, mismatched stems).
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Malformed checkpoint or raster file.
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss {loss} at epoch {epoch} for batch [{ids}]")]
    NonFinite { loss: f64, epoch: usize, ids: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

pub(crate) use contract_err;
pub(crate) use dim_err;
