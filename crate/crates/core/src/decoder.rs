//! Greedy and beam-search generation over the mixed distribution.
//!
//! Search is written against [`StepModel`], so the same code drives the
//! transformer and small hand-built tables in tests. Ties are always broken
//! towards the smaller id (greedy) or the lexicographically smaller sequence
//! (beam).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams};
use crate::tensor::Scalar;
use crate::tokenizer::{self, EncodedSource, OovTable, TokenizerError, Vocabulary, EOS};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("source of length {source_len} leaves no room to generate within max_seq_len {max}")]
    NoRoom { source_len: usize, max: usize },
    #[error("step distribution is empty")]
    EmptyDistribution,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_summary_len: usize,
    pub beam_width: usize,
    /// Beam scores are `log_prob / len^alpha`; 0 ranks by raw log-prob.
    pub length_norm_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_summary_len: 32,
            beam_width: 1,
            length_norm_alpha: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_summary_len == 0 {
            return Err(DecodeError::Config("max_summary_len must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(DecodeError::Config("beam_width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.length_norm_alpha) {
            return Err(DecodeError::Config(format!(
                "length_norm_alpha {} outside [0, 1]",
                self.length_norm_alpha
            )));
        }
        Ok(())
    }
}

/// Something that yields a next-token distribution for a prefix.
pub trait StepModel {
    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Upper bound on generated length imposed by the model itself.
    fn capacity(&self) -> usize {
        usize::MAX
    }
}

/// Adapter that runs the transformer over a fixed encoded source.
pub struct SourceStepper<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
    pub source: &'a EncodedSource,
}

impl<T: Scalar> StepModel for SourceStepper<'_, T> {
    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let out = self.params.next_step(self.source, prefix)?;
        Ok(out.mixed.iter().map(|p| p.as_f64()).collect())
    }

    fn capacity(&self) -> usize {
        // input is source + SEP + prefix; the last generated token is never fed
        self.params.config().max_seq_len.saturating_sub(self.source.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            ids: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    fn extend(&self, id: usize, p: f64) -> Self {
        let mut ids = self.ids.clone();
        ids.push(id);
        Hypothesis {
            ids,
            log_prob: self.log_prob + p.ln(),
            finished: id == EOS,
        }
    }

    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.ids.is_empty() {
            self.log_prob
        } else {
            self.log_prob / (self.ids.len() as f64).powf(alpha)
        }
    }
}

/// Best-first order: higher score, then lexicographically smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then_with(|| a.ids.cmp(&b.ids))
}

fn step_limit<M: StepModel>(model: &M, cfg: &DecodeConfig) -> usize {
    cfg.max_summary_len.min(model.capacity())
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(dist: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in dist.iter().enumerate() {
        if best.is_none_or(|b| p > dist[b]) {
            best = Some(i);
        }
    }
    best
}

/// Repeatedly emits the most probable id until EOS or the length limit.
pub fn greedy_decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let limit = step_limit(model, cfg);
    let mut hyp = Hypothesis::empty();
    while hyp.ids.len() < limit && !hyp.finished {
        let dist = model.next_distribution(&hyp.ids)?;
        let id = argmax(&dist).ok_or(DecodeError::EmptyDistribution)?;
        hyp = hyp.extend(id, dist[id]);
    }
    Ok(hyp)
}

/// Result of a beam search: the winner and the retained pool, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    pub best: Hypothesis,
    pub pool: Vec<Hypothesis>,
}

/// Standard beam search. Each step expands every live hypothesis by its
/// top-`k` ids, keeps the global top-`k` candidates, and retires finished
/// ones to a pool. Hypotheses cut off by the length limit join the pool
/// unfinished, and the best-scoring member of the pool is returned.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<BeamOutcome> {
    cfg.validate()?;
    let k = cfg.beam_width;
    let alpha = cfg.length_norm_alpha;
    let limit = step_limit(model, cfg);
    let mut beam = vec![Hypothesis::empty()];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..limit {
        let mut candidates = Vec::with_capacity(beam.len() * k);
        for hyp in &beam {
            let dist = model.next_distribution(&hyp.ids)?;
            if dist.is_empty() {
                return Err(DecodeError::EmptyDistribution);
            }
            let mut ids: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
            ids.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            candidates.extend(ids.into_iter().take(k).map(|id| hyp.extend(id, dist[id])));
        }
        candidates.sort_by(|a, b| rank(a, b, alpha));
        candidates.truncate(k);
        beam.clear();
        for c in candidates {
            if c.finished {
                pool.push(c);
            } else {
                beam.push(c);
            }
        }
        if beam.is_empty() {
            break;
        }
        // log-probs never increase, so with raw scores a finished leader cannot be overtaken
        if alpha == 0.0 {
            let best_done = pool.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = beam.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    // hypotheses still live at the length limit compete with the finished ones
    pool.append(&mut beam);
    pool.sort_by(|a, b| rank(a, b, alpha));
    let best = pool.first().cloned().unwrap_or_else(Hypothesis::empty);
    Ok(BeamOutcome { best, pool })
}

pub fn beam_decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    Ok(beam_search(model, cfg)?.best)
}

/// Greedy when `beam_width == 1`, beam search otherwise.
pub fn decode_with<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.beam_width == 1 {
        greedy_decode(model, cfg)
    } else {
        beam_decode(model, cfg)
    }
}

/// Renders extended ids as text; copied ids resolve to source words and
/// `UNK` renders as `<unk>`.
pub fn resolve_summary(ids: &[usize], vocab: &Vocabulary, oov: &OovTable) -> Result<String> {
    Ok(tokenizer::decode(ids, vocab, oov)?)
}

/// Encodes `source_text`, generates and resolves a summary.
pub fn summarize<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    source_text: &str,
    cfg: &DecodeConfig,
) -> Result<String> {
    let source = EncodedSource::encode(source_text, vocab);
    if source.len() + 1 > params.config().max_seq_len {
        return Err(DecodeError::NoRoom {
            source_len: source.len(),
            max: params.config().max_seq_len,
        });
    }
    let stepper = SourceStepper { params, source: &source };
    let hyp = decode_with(&stepper, cfg)?;
    resolve_summary(&hyp.ids, vocab, &source.oov)
}
