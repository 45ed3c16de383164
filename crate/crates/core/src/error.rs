use alloc::string::String;

/// Errors raised by the synthesis core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid CIEC: {0}")]
    Ciec(CiecViolation),
    #[error("unknown expression type `{0}`")]
    UnknownExpression(String),
    #[error("invalid intensity level {0}")]
    Level(u8),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid timeline: {0}")]
    Timeline(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
}

/// The specific way a raw vector failed CIEC validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CiecViolation {
    Length(usize),
    NotFinite,
    OutOfRange,
    MultipleNonZero,
}

impl core::fmt::Display for CiecViolation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CiecViolation::Length(n) => write!(f, "expected 7 entries, got {n}"),
            CiecViolation::NotFinite => f.write_str("entry is NaN or infinite"),
            CiecViolation::OutOfRange => f.write_str("entry outside [0, 1]"),
            CiecViolation::MultipleNonZero => f.write_str("more than one non-zero entry"),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err_fmt {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err_fmt;
