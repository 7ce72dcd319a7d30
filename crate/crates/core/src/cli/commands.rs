//! The train / summarize / evaluate / compare workflows.
//!
//! Each command returns its result instead of printing, so the binary and
//! the tests share one code path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{load_dataset, DatasetError, DatasetRecord};
use crate::checkpoint::{self, CheckpointError};
use crate::decoder::{summarize, DecodeConfig, DecodeError};
use crate::model::{HeadKind, ModelConfig, ModelError, ModelParams};
use crate::par::{with_workers, Execution};
use crate::rouge::{format_table, rouge_report, RougeError, RougeReport};
use crate::tokenizer::{EncodedExample, TokenizerError, Vocabulary};
use crate::trainer::{append_loss_log, train, TrainConfig, TrainError, TrainReport};

pub const SEED_ENV: &str = "POINTER_GPT_SEED";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOSS_LOG_FILE: &str = "loss.log";
pub const BASELINE_LABEL: &str = "GPT-baseline";
pub const POINTER_LABEL: &str = "PointerGPT";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("vocabulary has {vocab} entries but the checkpoint expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("{path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Rouge(#[from] RougeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CommandError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CommandError>;

/// Architecture without the vocabulary size, which comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f32,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 128,
            dropout_rate: 0.0,
        }
    }
}

impl ModelShape {
    pub fn to_config(&self, vocab_size: usize, seed: u64, head: HeadKind) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
            seed,
            head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 5000,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelShape,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    pub decode: DecodeConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CommandError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CommandError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// `flag`, else `POINTER_GPT_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CommandError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let records = load_dataset(path).map_err(|source| CommandError::Dataset {
        path: path.to_path_buf(),
        source,
    })?;
    if records.is_empty() {
        return Err(CommandError::Usage(format!("dataset {} is empty", path.display())));
    }
    Ok(records)
}

pub fn head_label(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Pointer => POINTER_LABEL,
        HeadKind::VocabOnly => BASELINE_LABEL,
    }
}

/// A trained model with the vocabulary it was built against.
pub struct Trained {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub report: TrainReport,
}

/// Builds the vocabulary from `records`, then trains one model on them.
pub fn fit(records: &[DatasetRecord], exp: &ExperimentConfig, seed: u64, head: HeadKind) -> Result<Trained> {
    let texts: Vec<&str> = records
        .iter()
        .flat_map(|r| [r.source.as_str(), r.summary.as_str()])
        .collect();
    let vocab = Vocabulary::build(&texts, exp.vocab.max_size, exp.vocab.min_freq)?;
    let mcfg = exp.model.to_config(vocab.len(), seed, head);
    let mut params = ModelParams::init(&mcfg)?;
    let data: Vec<EncodedExample> = records
        .iter()
        .map(|r| EncodedExample::encode(&r.source, &r.summary, &vocab))
        .collect();
    let tcfg = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let report = train(&mut params, &data, &tcfg)?;
    Ok(Trained { params, vocab, report })
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub baseline: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub loss_log: PathBuf,
    pub steps: usize,
    pub final_loss: f32,
}

/// Trains a model and writes `model.ckpt`, `vocab.txt` and `loss.log`
/// into `args.out`.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let exp = ExperimentConfig::load_or_default(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, exp.train.seed)?;
    let records = read_dataset(&args.data)?;
    let head = if args.baseline { HeadKind::VocabOnly } else { HeadKind::Pointer };
    let trained = fit(&records, &exp, seed, head)?;

    std::fs::create_dir_all(&args.out)?;
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    let vocab = args.out.join(VOCAB_FILE);
    let loss_log = args.out.join(LOSS_LOG_FILE);
    checkpoint::save(&trained.params, &checkpoint)?;
    trained.vocab.save(&vocab)?;
    if loss_log.exists() {
        std::fs::remove_file(&loss_log)?;
    }
    append_loss_log(&loss_log, &trained.report.losses, 1)?;
    Ok(TrainOutcome {
        checkpoint,
        vocab,
        loss_log,
        steps: trained.report.losses.len(),
        final_loss: trained.report.losses.last().copied().unwrap_or(f32::NAN),
    })
}

/// Loads a checkpoint and its vocabulary, checking that they agree.
pub fn load_model(ckpt: &Path, vocab: &Path) -> Result<(ModelParams, Vocabulary)> {
    let params = checkpoint::load(ckpt)?;
    let vocab = Vocabulary::load(vocab)?;
    if vocab.len() != params.config().vocab_size {
        return Err(CommandError::VocabMismatch {
            vocab: vocab.len(),
            model: params.config().vocab_size,
        });
    }
    Ok((params, vocab))
}

#[derive(Debug, Clone, Default)]
pub struct SummarizeArgs {
    pub ckpt: PathBuf,
    pub vocab: PathBuf,
    pub beam: Option<usize>,
    pub max_len: Option<usize>,
}

fn decode_config(beam: Option<usize>, max_len: Option<usize>) -> DecodeConfig {
    let d = DecodeConfig::default();
    DecodeConfig {
        beam_width: beam.unwrap_or(d.beam_width),
        max_summary_len: max_len.unwrap_or(d.max_summary_len),
        ..d
    }
}

pub fn cmd_summarize(args: &SummarizeArgs, source: &str) -> Result<String> {
    let (params, vocab) = load_model(&args.ckpt, &args.vocab)?;
    Ok(summarize(&params, &vocab, source, &decode_config(args.beam, args.max_len))?)
}

/// Decodes every source, with up to `workers` threads; output order and
/// content do not depend on the worker count.
pub fn decode_all(
    params: &ModelParams,
    vocab: &Vocabulary,
    sources: &[&str],
    cfg: &DecodeConfig,
    workers: usize,
) -> Result<Vec<String>> {
    let execution = if workers == 1 { Execution::Sequential } else { Execution::default() };
    with_workers(workers, || {
        execution
            .map(sources.len(), |i| summarize(params, vocab, sources[i], cfg))
            .into_iter()
            .map(|r| r.map_err(CommandError::from))
            .collect()
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub ckpt: PathBuf,
    pub vocab: PathBuf,
    pub data: PathBuf,
    pub beam: Option<usize>,
    pub max_len: Option<usize>,
    /// Score the references against themselves instead of decoding.
    pub self_test: bool,
    /// Decode threads; 0 uses all cores.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub label: &'static str,
    pub report: RougeReport,
    pub candidates: Vec<String>,
}

impl Evaluation {
    pub fn table(&self) -> String {
        format_table(&[(self.label, &self.report)])
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Evaluation> {
    let records = read_dataset(&args.data)?;
    let references: Vec<&str> = records.iter().map(|r| r.summary.as_str()).collect();
    let (label, candidates) = if args.self_test {
        ("reference", references.iter().map(|s| s.to_string()).collect())
    } else {
        let (params, vocab) = load_model(&args.ckpt, &args.vocab)?;
        let sources: Vec<&str> = records.iter().map(|r| r.source.as_str()).collect();
        let cfg = decode_config(args.beam, args.max_len);
        let out = decode_all(&params, &vocab, &sources, &cfg, args.workers)?;
        (head_label(params.config().head), out)
    };
    let report = rouge_report(&candidates, &references)?;
    Ok(Evaluation {
        label,
        report,
        candidates,
    })
}

#[derive(Debug, Clone, Default)]
pub struct CompareArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: RougeReport,
    pub pointer: RougeReport,
    pub train_size: usize,
    pub test_size: usize,
}

impl Comparison {
    pub fn table(&self) -> String {
        format_table(&[(BASELINE_LABEL, &self.baseline), (POINTER_LABEL, &self.pointer)])
    }
}

/// First 80% of records (by index) for training, the rest held out.
pub fn split_80_20<T>(records: &[T]) -> (&[T], &[T]) {
    records.split_at(records.len() * 4 / 5)
}

/// Trains the baseline and the pointer model with the same seed and
/// config on the training split and scores both on the held-out split.
pub fn cmd_compare(args: &CompareArgs) -> Result<Comparison> {
    let exp = ExperimentConfig::load_or_default(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, exp.train.seed)?;
    let records = read_dataset(&args.data)?;
    let (train_set, test_set) = split_80_20(&records);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(CommandError::Usage(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    let sources: Vec<&str> = test_set.iter().map(|r| r.source.as_str()).collect();
    let references: Vec<&str> = test_set.iter().map(|r| r.summary.as_str()).collect();
    let mut reports = Vec::with_capacity(2);
    for head in [HeadKind::VocabOnly, HeadKind::Pointer] {
        let trained = fit(train_set, &exp, seed, head)?;
        let out = decode_all(&trained.params, &trained.vocab, &sources, &exp.decode, args.workers)?;
        reports.push(rouge_report(&out, &references)?);
    }
    Ok(Comparison {
        baseline: reports[0],
        pointer: reports[1],
        train_size: train_set.len(),
        test_size: test_set.len(),
    })
}
