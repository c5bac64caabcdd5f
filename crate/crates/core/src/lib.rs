//! Long-context BERT-style text embeddings on the CPU.
//!
//! The crate covers the full stack: a small tensor library with reverse-mode
//! differentiation, a WordPiece tokenizer, an encoder that uses symmetric
//! ALiBi attention instead of position embeddings, whole-word masked language
//! modeling, mean-pooled embeddings, contrastive fine-tuning, a trainer with
//! checkpoints, and evaluation kernels.

pub mod alibi;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod embedder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod io;
pub mod mlm;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
