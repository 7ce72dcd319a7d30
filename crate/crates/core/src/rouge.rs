//! ROUGE-N with clipped n-gram overlap.
//!
//! Texts go through [`tokenize`], so scoring is case-insensitive and treats
//! punctuation as separate tokens. No stemming or stopword removal.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum RougeError {
    #[error("n-gram order must be at least 1, got {0}")]
    BadOrder(usize),
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("nothing to score")]
    Empty,
}

pub type Result<T> = std::result::Result<T, RougeError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl RougeScore {
    pub fn new(precision: f64, recall: f64) -> Self {
        RougeScore {
            precision,
            recall,
            f_measure: f_measure(precision, recall),
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset of contiguous n-grams.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> Result<HashMap<Vec<&str>, usize>> {
    if n == 0 {
        return Err(RougeError::BadOrder(n));
    }
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// ROUGE-N over already tokenized sequences.
pub fn rouge_n_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Result<RougeScore> {
    let cand = ngram_counts(candidate, n)?;
    let refs = ngram_counts(reference, n)?;
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<Vec<&str>, usize>| m.values().sum::<usize>();
    let ratio = |den: usize| if den == 0 { 0.0 } else { overlap as f64 / den as f64 };
    Ok(RougeScore::new(ratio(total(&cand)), ratio(total(&refs))))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore> {
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

/// Corpus-level ROUGE-1 and ROUGE-2.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
}

/// Mean of per-pair precision, recall and F, each averaged independently.
pub fn rouge_report<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<RougeReport> {
    if candidates.len() != references.len() {
        return Err(RougeError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(RougeError::Empty);
    }
    let mut sums = [[0.0f64; 3]; 2];
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (tokenize(c.as_ref()), tokenize(r.as_ref()));
        for (n, sum) in sums.iter_mut().enumerate() {
            let s = rouge_n_tokens(&c, &r, n + 1)?;
            sum[0] += s.precision;
            sum[1] += s.recall;
            sum[2] += s.f_measure;
        }
    }
    let k = candidates.len() as f64;
    let mean = |s: [f64; 3]| RougeScore {
        precision: s[0] / k,
        recall: s[1] / k,
        f_measure: s[2] / k,
    };
    Ok(RougeReport {
        rouge1: mean(sums[0]),
        rouge2: mean(sums[1]),
    })
}

/// Aligned text table with one two-row group per labelled report.
pub fn format_table(rows: &[(&str, &RougeReport)]) -> String {
    let header = ["Algorithm", "Evaluation metric", "Precision", "Recall", "F measure"];
    let mut cells: Vec<[String; 5]> = Vec::new();
    for (label, report) in rows {
        for (i, (metric, s)) in [("Rouge-1", report.rouge1), ("Rouge-2", report.rouge2)]
            .into_iter()
            .enumerate()
        {
            cells.push([
                if i == 0 { label.to_string() } else { String::new() },
                metric.to_string(),
                format!("{:.4}", s.precision),
                format!("{:.4}", s.recall),
                format!("{:.4}", s.f_measure),
            ]);
        }
    }
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |row: [&str; 5]| {
        let mut l = String::new();
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i + 1 == row.len() {
                l.push_str(c);
            } else {
                let _ = write!(l, "{c:<w$}  ");
            }
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(header);
    for row in &cells {
        line([&row[0], &row[1], &row[2], &row[3], &row[4]].map(String::as_str));
    }
    out
}
