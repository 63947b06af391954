use alloc::string::String;
use core::fmt;

/// Errors raised by the forecasting core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Dimension(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// A signal length is incompatible with the requested transform.
    Length(String),
    /// Wavelet coefficient vectors are inconsistent with their metadata.
    Structure(String),
    /// A NaN or infinity surfaced where a finite value was required.
    Numeric(String),
    /// Optimizer or training loop contract violation.
    Training(String),
    /// The window cannot be cut into the requested patches.
    Patching(String),
    /// Malformed input data; `row` is 1-based over data rows.
    Ingestion { row: usize, message: String },
    /// Every element was excluded from a metric.
    UndefinedMetric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Length(m) => write!(f, "length error: {m}"),
            Error::Structure(m) => write!(f, "structure error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Patching(m) => write!(f, "patching error: {m}"),
            Error::Ingestion { row, message } => write!(f, "ingestion error at row {row}: {message}"),
            Error::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
