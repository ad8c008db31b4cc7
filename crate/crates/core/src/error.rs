use thiserror::Error;

use crate::store::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (geometry, kernel sizes, ratios).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite activation in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("requested k = {k} exceeds numerical rank {rank}")]
    RankDeficient { k: usize, rank: usize },

    #[error(transparent)]
    Store(#[from] StoreError),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
