//! Named entity disambiguation with verbalized knowledge-graph context.
//!
//! A candidate entity's KG triples are rendered as text, appended to the
//! sentence and mention as extra segments, and scored by a small
//! transformer classifier.

pub mod candidates;
pub mod context;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kg;
pub mod model;
pub mod synthetic;
pub mod tokenize;

pub use error::{Error, Result};
