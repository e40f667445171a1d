//! Hierarchical context compression and top-down sparse retrieval on a small
//! decoder-only transformer.

mod codec;
pub mod compressor;
pub mod data;
pub mod error;
pub mod eval;
pub mod memstore;
pub mod model;
pub mod persist;
pub mod retriever;
pub mod session;
pub mod trainer;

pub use error::{Error, Result};
pub use hmem_autograd as autograd;
