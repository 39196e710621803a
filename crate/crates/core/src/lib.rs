//! Core algorithms for self-critical report generation with an entropy
//! bonus: autodiff, synthetic corpus, tokenizer, model, decoding, metrics
//! and training.

pub mod corpus;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;
