//! Pointer-augmented GPT summarizer.
//!
//! A miniature decoder-only transformer reads `[source, SEP, summary]` and,
//! at every summary position, mixes its vocabulary softmax with a copy
//! distribution over source positions through a learned generation gate.
//! Out-of-vocabulary source words get per-example extended ids so they can
//! be copied into the summary.

pub mod checkpoint;
pub mod cli;
pub mod decoder;
pub mod model;
pub mod par;
pub mod rouge;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
