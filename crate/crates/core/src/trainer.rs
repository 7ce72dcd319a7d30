//! Teacher-forced training with Adam and global-norm clipping.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams, TeacherForced};
use crate::par::Execution;
use crate::tensor::{adam_step, clip_grad_norm, OptimizerState, Scalar, Tensor, TensorError};
use crate::tokenizer::EncodedExample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {index} does not fit the model: {source}")]
    BadExample { index: usize, source: ModelError },
    #[error("non-finite loss at step {step} (example {example})")]
    NonFinite { step: usize, example: usize },
    #[error("parameter {name} became non-finite at step {step}")]
    NonFiniteParam { step: usize, name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: f32,
    pub seed: u64,
    /// Evaluate the full training-set loss every this many steps (0 = never).
    pub eval_every: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            epochs: 1,
            max_grad_norm: 1.0,
            seed: 0,
            eval_every: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f32>,
    /// `(step, training-set loss)` at every `eval_every` boundary.
    pub evals: Vec<(usize, f32)>,
    pub wall_clock: Duration,
}

fn dropout_seed(seed: u64, step: usize, example: usize) -> u64 {
    // splitmix-style mixing so neighbouring (step, example) pairs decorrelate
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (example as u64).rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `tcfg.epochs` seeded-shuffle passes over `dataset`, updating
/// `params` in place. Per-example gradients may be computed in parallel;
/// they are always reduced in batch order, so results do not depend on the
/// execution mode.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    dataset: &[EncodedExample],
    tcfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (index, ex) in dataset.iter().enumerate() {
        TeacherForced::new(ex, params.config()).map_err(|source| TrainError::BadExample { index, source })?;
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut opt = OptimizerState::new(
        T::lit(tcfg.lr as f64),
        T::lit(tcfg.beta1 as f64),
        T::lit(tcfg.beta2 as f64),
        T::lit(tcfg.eps as f64),
    );
    let use_dropout = params.config().dropout_rate > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    params.zero_grad();
    for _ in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tcfg.batch_size) {
            let snapshot: &ModelParams<T> = params;
            let results = tcfg.execution.map(batch.len(), |j| {
                let idx = batch[j];
                let seed = use_dropout.then(|| dropout_seed(tcfg.seed, step, idx));
                snapshot.loss_and_grads(&dataset[idx], seed)
            });
            let scale = T::one() / T::lit(batch.len() as f64);
            let mut loss_sum = T::zero();
            let mut grad_sum: Option<Vec<Vec<T>>> = None;
            for (j, r) in results.into_iter().enumerate() {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        step,
                        example: batch[j],
                    });
                }
                loss_sum = loss_sum + loss;
                match grad_sum.as_mut() {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x = *x + y;
                            }
                        }
                    }
                }
            }
            let grads = grad_sum.expect("non-empty batch");
            for (t, mut g) in params.tensors_mut().iter_mut().zip(grads) {
                g.iter_mut().for_each(|x| *x = *x * scale);
                t.accumulate_grad(&g)?;
            }
            let mut refs: Vec<&mut Tensor<T>> = params.tensors_mut().iter_mut().collect();
            clip_grad_norm(&mut refs, T::lit(tcfg.max_grad_norm as f64));
            adam_step(&mut refs, &mut opt)?;
            drop(refs);
            params.zero_grad();
            if let Some(i) = params.tensors().iter().position(|t| !t.all_finite()) {
                return Err(TrainError::NonFiniteParam {
                    step,
                    name: params.names()[i].clone(),
                });
            }
            report.losses.push((loss_sum * scale).as_f64() as f32);
            step += 1;
            if tcfg.eval_every > 0 && step.is_multiple_of(tcfg.eval_every) {
                let l = evaluate_loss(params, dataset, tcfg.execution)?;
                report.evals.push((step, l.as_f64() as f32));
            }
        }
    }
    report.wall_clock = start.elapsed();
    Ok(report)
}

/// Mean teacher-forced loss over `dataset` without recording gradients.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[EncodedExample],
    execution: Execution,
) -> Result<T, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let losses = execution.map(dataset.len(), |i| params.sequence_loss(&dataset[i]));
    let mut total = T::zero();
    for l in losses {
        total = total + l?;
    }
    Ok(total / T::lit(dataset.len() as f64))
}

/// Appends `step<TAB>loss` lines, numbering from `first_step`.
pub fn append_loss_log(path: &Path, losses: &[f32], first_step: usize) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for (i, l) in losses.iter().enumerate() {
        buf.push_str(&format!("{}\t{}\n", first_step + i, l));
    }
    f.write_all(buf.as_bytes())
}
