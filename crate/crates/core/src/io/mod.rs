//! File formats and tokenization.

pub mod checkpoint;
pub mod config;
pub mod files;
pub mod tokenizer;
