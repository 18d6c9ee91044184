pub mod corpus;
pub mod embedder;
pub mod error;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod seq2seq;

pub use error::{Error, ProviderError, Result};
