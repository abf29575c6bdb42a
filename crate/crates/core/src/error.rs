//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// All failure modes surfaced by the core library.
///
/// Every variant carries a human-readable message; shape errors always
/// name both offending shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires.
    Dimension(String),
    /// A configuration value is invalid or inconsistent.
    Config(String),
    /// Caller-provided data is invalid (non-finite values, bad labels,
    /// wrong widths).
    Input(String),
    /// An API contract was violated (non-scalar loss, missing gradient,
    /// tensors from different tapes).
    Contract(String),
    /// A NaN or infinity appeared where only finite values are allowed.
    Numeric(String),
    /// A dataset-level problem (too few batches, empty split).
    Data(String),
    /// Every position in a batch carried the ignore label.
    EmptyBatch(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::EmptyBatch(m) => write!(f, "empty batch: {m}"),
        }
    }
}

impl core::error::Error for Error {}
