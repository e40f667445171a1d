use hmem_autograd::TensorError;
use thiserror::Error;

use crate::memstore::NodeRef;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {needed} positions exceeds the window of {max}")]
    WindowOverflow { needed: usize, max: usize },
    #[error("mask is {mask}x{mask} but the sequence has {seq} positions")]
    MaskDimension { mask: usize, seq: usize },
    #[error("invalid attention mask: {0}")]
    InvalidMask(String),
    #[error("cannot compress an empty chunk")]
    EmptyChunk,
    #[error("context must not be empty")]
    EmptyContext,
    #[error("{field} mismatch: database has {expected}, got {actual}")]
    ConfigMismatch {
        field: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("unknown chunk id {0}")]
    UnknownChunk(u64),
    #[error("node {0:?} has no children")]
    NoChildren(NodeRef),
    #[error("node {0:?} is out of range")]
    NodeOutOfRange(NodeRef),
    #[error("the database is empty; skip retrieval")]
    EmptyDatabase,
    #[error("retrieval step needs at least one candidate")]
    EmptyCandidates,
    #[error("format error: {0}")]
    Format(String),
    #[error("model fingerprint {model:016x} does not match database fingerprint {database:016x}")]
    FingerprintMismatch { model: u64, database: u64 },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
