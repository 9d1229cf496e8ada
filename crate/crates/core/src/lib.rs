//! Parallel and cascaded contrastive alignment of a trainable speech branch
//! against frozen image and text embeddings, with a vector-quantized keyword
//! bottleneck, simulated frozen teachers, and the retrieval/keyword
//! evaluation suite.

pub mod cli;
pub mod codec;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rng;
pub mod teachers;
pub mod training;

pub use error::{Error, Result};
