//! Joint entity and relation extraction by one-step set prediction.
//!
//! A fixed bank of learnable instance queries is decoded against span-level
//! sentence representations; each query proposes at most one relational
//! triple via a type head and four cosine-metric boundary heads. Training
//! matches gold triples to queries with a Hungarian assignment, adds two
//! contrastive instance-discrimination objectives, and optimizes everything
//! with AdamW on a from-scratch reverse-mode tape.

pub mod error;
pub mod parallel;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
