//! Multi-view dense retrieval.
//!
//! Documents are encoded with several viewer tokens, each yielding one
//! embedding; a query scores a document by the best of its viewers.
//! Training combines a contrastive loss over documents with a local loss
//! over the positive document's viewers, under a per-epoch annealed
//! temperature. The index stores every viewer vector and merges hits per
//! document.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod scoring;
pub mod text;
pub mod train;

pub use error::{MvrError, Result};
