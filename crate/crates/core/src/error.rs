use alloc::string::String;
use alloc::vec::Vec;

use crate::{ItemId, TokenId};

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("token {token} is not legal here (legal: {legal:?})")]
    Constraint { token: TokenId, legal: Vec<TokenId> },
    #[error("invalid state: {0}")]
    State(String),
    #[error("sequence too long: {0}")]
    Length(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("item {0} has no semantic id")]
    MissingSid(ItemId),
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
