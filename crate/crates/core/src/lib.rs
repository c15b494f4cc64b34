//! Retrieval-augmented generation with document-quality scores injected
//! into the attention logits of a small decoder-only transformer.
//!
//! The crate covers the whole path: a synthetic fact corpus, a toy dense
//! retriever, per-document quality indicators, prompt segmentation with a
//! token-level score matrix, the modulated transformer itself (forward,
//! backward, training, greedy decoding), noisy list construction and the
//! evaluation harness. [`pipeline`] ties them together behind one config.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod indicators;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod rag;
pub mod retrieval;
pub mod robustness;

pub use error::{Error, Result};
