//! Retrieval-based sparse attention.
//!
//! Attention over a long KV cache is approximated by splitting the context into
//! a statically resident set (initial tokens plus a local window) and a pool of
//! keys that is searched at decode time through a vector index. The two partial
//! attention results are merged exactly, so the only approximation is which
//! keys the index returns.
//!
//! Three indexes are provided: an exact linear scan ([`index::FlatIndex`]), a
//! k-means inverted file ([`index::IvfIndex`]), and a graph built from
//! query-to-key nearest-neighbor links ([`index::OodGraph`]) that stays
//! efficient when queries and keys come from different distributions.

pub mod attention;
pub mod cli;
pub mod diagnostics;
pub mod engine;
mod error;
pub mod index;
pub mod kernel;
pub mod vecstore;

pub use error::{Error, Result};
