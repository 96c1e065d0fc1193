//! Neural reranking of code completion candidates.
pub mod corpus;
pub mod encoders;
mod error;
pub mod eval;
pub mod model;
pub mod providers;
pub mod tokenizers;
pub mod train;

pub use error::{Error, Result};
