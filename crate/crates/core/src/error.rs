use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument violates its documented precondition.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// Two values that must agree structurally do not.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration cannot be used for the requested operation.
    #[error("configuration error: {0}")]
    Config(String),
    /// A loss became NaN or infinite during training.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Param(alloc::format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}

pub(crate) use contract_err;
pub(crate) use param_err;
