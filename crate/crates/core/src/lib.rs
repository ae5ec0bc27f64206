//! Retrieval-augmented dialog generation.
//!
//! A small recurrence-memory causal language model is trained on dialogs; one
//! forward pass over the training data harvests a datastore of
//! (context embedding, next token) pairs; at inference the LM's next-token
//! distribution is interpolated with a distribution built from the k nearest
//! stored contexts, and assistant turns are decoded greedily.

pub mod binio;
pub mod config;
pub mod corpus;
pub mod datastore;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod lm;
pub mod pipeline;

pub use error::{Error, Result};
