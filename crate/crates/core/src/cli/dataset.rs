//! JSONL datasets: one `{"source": .., "summary": ..}` object per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::write_atomic;
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub source: String,
    pub summary: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: missing field \"{field}\"")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field \"{field}\" has no tokens")]
    EmptyField { line: usize, field: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn field(obj: &serde_json::Map<String, Value>, line: usize, name: &'static str) -> Result<String, DatasetError> {
    match obj.get(name) {
        None => Err(DatasetError::MissingField { line, field: name }),
        Some(Value::String(s)) if tokenize(s).is_empty() => Err(DatasetError::EmptyField { line, field: name }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(DatasetError::Malformed {
            line,
            msg: format!("field \"{name}\" must be a string, got {other}"),
        }),
    }
}

/// Parses records in order; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: line_no,
            msg: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(DatasetError::Malformed {
                line: line_no,
                msg: "expected a JSON object".into(),
            });
        };
        out.push(DatasetRecord {
            source: field(&obj, line_no, "source")?,
            summary: field(&obj, line_no, "summary")?,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    parse_dataset(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}
