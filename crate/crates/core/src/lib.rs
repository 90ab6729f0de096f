//! Dual-encoder text embedding toolkit: a small bidirectional transformer
//! trained contrastively with in-batch negatives and nested (Matryoshka)
//! output prefixes, plus exact retrieval, ranking metrics and checkpoint
//! averaging.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod selfcheck;
pub mod soup;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
