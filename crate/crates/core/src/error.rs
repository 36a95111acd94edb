use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes or a malformed graph.
    #[error("structural error: {0}")]
    Structural(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by operation #{index} ({op})")]
    NonFinite { index: usize, op: &'static str },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training stopped at accuracy {accuracy:.4} after {epochs} epochs (target {target:.2})")]
    TrainingBudget {
        accuracy: f64,
        epochs: usize,
        target: f64,
    },
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}

pub(crate) use bail;
