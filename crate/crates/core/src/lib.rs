//! Guided image captioning.
//!
//! A multimodal encoder-decoder Transformer that writes a caption about the
//! concept named by a short guiding text, together with the data pipeline,
//! training loop, beam-search decoder and caption metrics around it.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
