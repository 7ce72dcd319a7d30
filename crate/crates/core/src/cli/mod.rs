//! Dataset ingestion, experiment configs and the command workflows behind
//! the `pointer-gpt` binary.

pub mod commands;
pub mod dataset;
pub mod synth;

pub use commands::*;
pub use dataset::{load_dataset, parse_dataset, write_dataset, DatasetError, DatasetRecord};
pub use synth::{copy_task, SyntheticCorpus};
