//! GPT-style decoder with a pointer-generator output head.
//!
//! The transformer runs over `[source ids, SEP, summary prefix]`. Final-layer
//! hidden states at source positions act as memory for the pointer; the hidden
//! state at a summary position is the query. For query `q` and memory `h_i`:
//!
//! ```text
//! score_i = q · W_ptr · h_i            attn = softmax(score)
//! c       = Σ attn_i h_i
//! p_gen   = sigmoid(w_h · q + w_c · c + b_gate)
//! mixed   = p_gen · softmax(q · W_vocab)  (+)  (1 - p_gen) · attn scattered onto source ext ids
//! ```
//!
//! Blocks are pre-norm with causal multi-head self-attention and a GELU MLP.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{EncodedExample, EncodedSource, SEP, UNK};

/// Probability floor inside the log of the training loss.
pub const LOSS_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {limit}")]
    IdOutOfRange { id: usize, limit: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Output head variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Gated mixture of vocabulary softmax and source copy distribution.
    #[default]
    Pointer,
    /// Baseline: gate hard-wired to `p_gen = 1`; pointer parameters stay in
    /// the model but receive no gradient.
    VocabOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout_rate: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size <= crate::tokenizer::SPECIALS.len() {
            return fail(format!("vocab_size {} leaves no room beyond specials", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads, n_layers and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 8 {
            return fail(format!("max_seq_len {} below 8", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let (v, d, ff, l) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
    let s = |name: String, shape: Vec<usize>, init| Slot { name, shape, init };
    let mut out = vec![
        s("tok_emb".into(), vec![v, d], Init::Normal),
        s("pos_emb".into(), vec![l, d], Init::Normal),
    ];
    for i in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        out.extend([
            s(p("ln1.gain"), vec![d], Init::Ones),
            s(p("ln1.bias"), vec![d], Init::Zeros),
            s(p("attn.w_q"), vec![d, d], Init::Normal),
            s(p("attn.b_q"), vec![d], Init::Zeros),
            s(p("attn.w_k"), vec![d, d], Init::Normal),
            s(p("attn.b_k"), vec![d], Init::Zeros),
            s(p("attn.w_v"), vec![d, d], Init::Normal),
            s(p("attn.b_v"), vec![d], Init::Zeros),
            s(p("attn.w_o"), vec![d, d], Init::Normal),
            s(p("attn.b_o"), vec![d], Init::Zeros),
            s(p("ln2.gain"), vec![d], Init::Ones),
            s(p("ln2.bias"), vec![d], Init::Zeros),
            s(p("mlp.w_fc"), vec![d, ff], Init::Normal),
            s(p("mlp.b_fc"), vec![ff], Init::Zeros),
            s(p("mlp.w_proj"), vec![ff, d], Init::Normal),
            s(p("mlp.b_proj"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        s("ln_f.gain".into(), vec![d], Init::Ones),
        s("ln_f.bias".into(), vec![d], Init::Zeros),
        s("head.w_vocab".into(), vec![d, v], Init::Normal),
        s("pointer.w_ptr".into(), vec![d, d], Init::Normal),
        s("pointer.w_gate_h".into(), vec![d, 1], Init::Normal),
        s("pointer.w_gate_c".into(), vec![d, 1], Init::Normal),
        s("pointer.b_gate".into(), vec![1], Init::Zeros),
    ]);
    out
}

/// All trainable tensors in a fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Weights ~ N(0, 0.02) from a generator seeded with `config.seed`,
    /// biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for slot in layout(config) {
            let n: usize = slot.shape.iter().product();
            let data: Vec<T> = match slot.init {
                Init::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            names.push(slot.name);
            tensors.push(Tensor::new(slot.shape, data)?.with_requires_grad(true));
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let slots = layout(config);
        if slots.len() != named.len() {
            return Err(ModelError::Layout(format!("expected {} tensors, got {}", slots.len(), named.len())));
        }
        let mut names = Vec::with_capacity(slots.len());
        let mut tensors = Vec::with_capacity(slots.len());
        for (slot, (name, t)) in slots.into_iter().zip(named) {
            if slot.name != name || slot.shape != t.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {} {:?}, got {} {:?}",
                    slot.name,
                    slot.shape,
                    name,
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t.with_requires_grad(true));
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches the output head without touching weights.
    pub fn set_head(&mut self, head: HeadKind) {
        self.config.head = head;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter on `tape` (differentiable when `trainable`).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Bound::new(vars, self.config.n_layers)
    }
}

/// Parameter handles on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    n_layers: usize,
}

struct LayerVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    fc: (Var, Var),
    proj: (Var, Var),
}

impl Bound {
    /// Wraps vars that follow the canonical parameter order.
    pub fn new(vars: Vec<Var>, n_layers: usize) -> Self {
        assert_eq!(vars.len(), 2 + PER_LAYER * n_layers + 7, "parameter count");
        Bound { vars, n_layers }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize) -> LayerVars {
        let b = 2 + l * PER_LAYER;
        let v = |i: usize| self.vars[b + i];
        LayerVars {
            ln1: (v(0), v(1)),
            q: (v(2), v(3)),
            k: (v(4), v(5)),
            v: (v(6), v(7)),
            o: (v(8), v(9)),
            ln2: (v(10), v(11)),
            fc: (v(12), v(13)),
            proj: (v(14), v(15)),
        }
    }

    fn tail(&self, i: usize) -> Var {
        self.vars[2 + self.n_layers * PER_LAYER + i]
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f32, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - rate as f64));
            let mask = (0..tape.value(x).numel())
                .map(|_| if rng.random::<f32>() < rate { T::zero() } else { keep })
                .collect();
            Ok(tape.mul_const(x, mask)?)
        }
        _ => Ok(x),
    }
}

/// Records the transformer stack for `ids` and returns the final-layer
/// hidden states `[T×d_model]`. Passing an RNG enables dropout.
pub fn hidden_graph<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(ModelError::Contract("empty input sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id,
            limit: cfg.vocab_size,
        });
    }
    let tok = tape.gather_rows(bound.tok_emb(), ids)?;
    let pos = tape.slice_rows(bound.pos_emb(), 0, ids.len())?;
    let mut x = tape.add(tok, pos)?;
    let eps = T::lit(LN_EPS);
    for l in 0..bound.n_layers {
        let lv = bound.layer(l);
        let h = tape.layer_norm(x, lv.ln1.0, lv.ln1.1, eps)?;
        let q = linear(tape, h, lv.q)?;
        let k = linear(tape, h, lv.k)?;
        let v = linear(tape, h, lv.v)?;
        let a = tape.causal_attention(q, k, v, cfg.n_heads)?;
        let a = linear(tape, a, lv.o)?;
        let a = dropout(tape, a, cfg.dropout_rate, rng.as_deref_mut())?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, lv.ln2.0, lv.ln2.1, eps)?;
        let m = linear(tape, h, lv.fc)?;
        let m = tape.gelu(m)?;
        let m = linear(tape, m, lv.proj)?;
        let m = dropout(tape, m, cfg.dropout_rate, rng.as_deref_mut())?;
        x = tape.add(x, m)?;
    }
    Ok(tape.layer_norm(x, bound.tail(0), bound.tail(1), eps)?)
}

/// Tape handles of the output head for a block of query rows.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `[N×S]` pointer distribution over source positions.
    pub attn: Var,
    /// `[N×1]` generation gate; `None` for the vocab-only head.
    pub p_gen: Option<Var>,
    /// `[N×V]` vocabulary softmax.
    pub vocab: Var,
    /// `[N×E]` mixture over the extended vocabulary.
    pub mixed: Var,
}

/// Records the output head for query rows `queries` of `hidden`, pointing
/// at memory rows `0..source_len`.
#[allow(clippy::too_many_arguments)]
pub fn head_graph<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    hidden: Var,
    source_len: usize,
    queries: Range<usize>,
    source_ext_ids: &[usize],
    width: usize,
) -> Result<HeadVars> {
    if source_len == 0 || source_ext_ids.len() != source_len {
        return Err(ModelError::Contract(format!(
            "source span {source_len} vs {} extended ids",
            source_ext_ids.len()
        )));
    }
    if queries.start < source_len {
        return Err(ModelError::Contract(format!(
            "query position {} lies inside the source span 0..{source_len}",
            queries.start
        )));
    }
    let q = tape.slice_rows(hidden, queries.start, queries.end)?;
    let mem = tape.slice_rows(hidden, 0, source_len)?;
    let mem_t = tape.transpose(mem)?;
    let proj = tape.matmul(q, bound.tail(3))?;
    let scores = tape.matmul(proj, mem_t)?;
    let attn = tape.softmax_rows(scores)?;
    let logits = tape.matmul(q, bound.tail(2))?;
    let vocab = tape.softmax_rows(logits)?;
    let p_gen = match cfg.head {
        HeadKind::Pointer => {
            let ctx = tape.matmul(attn, mem)?;
            let gh = tape.matmul(q, bound.tail(4))?;
            let gc = tape.matmul(ctx, bound.tail(5))?;
            let g = tape.add(gh, gc)?;
            let g = tape.add_row(g, bound.tail(6))?;
            Some(tape.sigmoid(g)?)
        }
        HeadKind::VocabOnly => None,
    };
    let mixed = tape.pointer_mix(vocab, attn, p_gen, source_ext_ids, width)?;
    Ok(HeadVars {
        attn,
        p_gen,
        vocab,
        mixed,
    })
}

/// Teacher-forced layout of one example: model input, source span length and
/// per-step targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherForced {
    pub input: Vec<usize>,
    pub source_len: usize,
    pub targets: Vec<usize>,
    pub width: usize,
}

impl TeacherForced {
    pub fn new(example: &EncodedExample, cfg: &ModelConfig) -> Result<Self> {
        let v = cfg.vocab_size;
        let src = &example.source;
        let targets = &example.target_ext_ids;
        if src.is_empty() || targets.is_empty() {
            return Err(ModelError::Contract("empty source or target".into()));
        }
        let mut input = src.ids.clone();
        input.push(SEP);
        input.extend(targets[..targets.len() - 1].iter().map(|&t| if t >= v { UNK } else { t }));
        if input.len() > cfg.max_seq_len {
            return Err(ModelError::TooLong {
                len: input.len(),
                max: cfg.max_seq_len,
            });
        }
        let width = v + src.oov.len();
        let targets = match cfg.head {
            HeadKind::Pointer => targets.clone(),
            // a vocab-only model can only ever be taught UNK for copied words
            HeadKind::VocabOnly => targets.iter().map(|&t| if t >= v { UNK } else { t }).collect(),
        };
        Ok(TeacherForced {
            input,
            source_len: src.len(),
            targets,
            width,
        })
    }

    fn steps(&self) -> Range<usize> {
        self.source_len..self.source_len + self.targets.len()
    }
}

/// Records the mean teacher-forced NLL of `example`.
pub fn loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    example: &EncodedExample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let tf = TeacherForced::new(example, cfg)?;
    let hidden = hidden_graph(tape, bound, cfg, &tf.input, rng)?;
    let head = head_graph(
        tape,
        bound,
        cfg,
        hidden,
        tf.source_len,
        tf.steps(),
        example.source_ext_ids(),
        tf.width,
    )?;
    Ok(tape.nll_mean(head.mixed, &tf.targets, T::lit(LOSS_FLOOR))?)
}

/// Per-step head outputs, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PointerOutput<T = f32> {
    /// Distribution over source positions.
    pub attn: Vec<T>,
    pub p_gen: T,
    /// Vocabulary softmax (length V).
    pub vocab: Vec<T>,
    /// Mixture over the extended vocabulary (length V + |oov|).
    pub mixed: Vec<T>,
}

fn check_ext_ids(cfg: &ModelConfig, ext_ids: &[usize], oov_count: usize) -> Result<usize> {
    let width = cfg.vocab_size + oov_count;
    if let Some(&max) = ext_ids.iter().max() {
        if max >= width {
            return Err(ModelError::Contract(format!(
                "source id {max} inconsistent with {oov_count} OOV entries"
            )));
        }
    }
    Ok(width)
}

impl<T: Scalar> ModelParams<T> {
    /// Final-layer hidden states for `ids` (no dropout).
    pub fn forward_hidden(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = hidden_graph(&mut tape, &bound, &self.config, ids, None)?;
        Ok(tape.value(h).clone())
    }

    /// Output head at position `step` given precomputed hidden states, with
    /// the pointer attending over rows `0..source_len`.
    pub fn pointer_step(
        &self,
        hidden: &Tensor<T>,
        step: usize,
        source_len: usize,
        source_ext_ids: &[usize],
        oov_count: usize,
    ) -> Result<PointerOutput<T>> {
        if step < source_len {
            return Err(ModelError::Contract(format!(
                "step {step} precedes end of source span {source_len}"
            )));
        }
        let width = check_ext_ids(&self.config, source_ext_ids, oov_count)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = tape.constant(hidden);
        let head = head_graph(
            &mut tape,
            &bound,
            &self.config,
            h,
            source_len,
            step..step + 1,
            source_ext_ids,
            width,
        )?;
        Ok(detach(&tape, &head))
    }

    /// Head output for the next token after `prefix` (extended ids; copies
    /// re-enter the embedding as `UNK`).
    pub fn next_step(&self, source: &EncodedSource, prefix: &[usize]) -> Result<PointerOutput<T>> {
        let width = check_ext_ids(&self.config, &source.ext_ids, source.oov.len())?;
        let v = self.config.vocab_size;
        let mut input = source.ids.clone();
        input.push(SEP);
        input.extend(prefix.iter().map(|&t| if t >= v { UNK } else { t }));
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let hidden = hidden_graph(&mut tape, &bound, &self.config, &input, None)?;
        let last = input.len() - 1;
        let head = head_graph(
            &mut tape,
            &bound,
            &self.config,
            hidden,
            source.len(),
            last..last + 1,
            &source.ext_ids,
            width,
        )?;
        Ok(detach(&tape, &head))
    }

    /// Teacher-forced mixture distributions `[N×E]` for every summary step.
    pub fn step_distributions(&self, example: &EncodedExample) -> Result<Tensor<T>> {
        let tf = TeacherForced::new(example, &self.config)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let hidden = hidden_graph(&mut tape, &bound, &self.config, &tf.input, None)?;
        let head = head_graph(
            &mut tape,
            &bound,
            &self.config,
            hidden,
            tf.source_len,
            tf.steps(),
            example.source_ext_ids(),
            tf.width,
        )?;
        Ok(tape.value(head.mixed).clone())
    }

    /// Mean teacher-forced NLL of the mixed distribution (no dropout).
    pub fn sequence_loss(&self, example: &EncodedExample) -> Result<T> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let loss = loss_graph(&mut tape, &bound, &self.config, example, None)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and per-parameter gradients (canonical order; unused parameters
    /// get zeros). `dropout_seed` enables dropout when the config asks for it.
    pub fn loss_and_grads(&self, example: &EncodedExample, dropout_seed: Option<u64>) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let loss = loss_graph(&mut tape, &bound, &self.config, example, rng.as_mut())?;
        tape.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }
}

fn detach<T: Scalar>(tape: &Tape<T>, head: &HeadVars) -> PointerOutput<T> {
    PointerOutput {
        attn: tape.value(head.attn).data().to_vec(),
        p_gen: head.p_gen.map_or(T::one(), |g| tape.value(g).data()[0]),
        vocab: tape.value(head.vocab).data().to_vec(),
        mixed: tape.value(head.mixed).data().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{OovTable, Vocabulary, EOS};

    pub(crate) fn toy_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 16,
            dropout_rate: 0.0,
            seed,
            head: HeadKind::Pointer,
        }
    }

    fn toy_example() -> EncodedExample {
        EncodedExample {
            source: EncodedSource {
                ids: vec![7, UNK, 9, UNK, EOS],
                ext_ids: vec![7, 20, 9, 21, EOS],
                oov: OovTable::new(vec!["aa".into(), "bb".into()]),
            },
            target_ext_ids: vec![20, 12, 21, EOS],
        }
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config(0);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        let mut c = toy_config(0);
        c.max_seq_len = 7;
        assert!(c.validate().is_err());
        let mut c = toy_config(0);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(&toy_config(1)).unwrap();
        let b = ModelParams::<f32>::init(&toy_config(1)).unwrap();
        let c = ModelParams::<f32>::init(&toy_config(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors(), c.tensors());
        assert_eq!(a.get("pointer.b_gate").unwrap().data(), &[0.0]);
        assert!(a.get("layers.1.ln2.gain").unwrap().data().iter().all(|&g| g == 1.0));
        assert!(a.get("layers.0.attn.b_q").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn embedding_std_matches_init() {
        let cfg = ModelConfig {
            vocab_size: 200,
            d_model: 64,
            ..toy_config(9)
        };
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let emb = p.get("tok_emb").unwrap().data();
        let n = emb.len() as f64;
        let mean = emb.iter().sum::<f64>() / n;
        let std = (emb.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.005, "std {std}");
    }

    #[test]
    fn hidden_shapes_and_errors() {
        let p = ModelParams::<f32>::init(&toy_config(3)).unwrap();
        let h = p.forward_hidden(&[5]).unwrap();
        assert_eq!(h.shape(), &[1, 16]);
        let h = p.forward_hidden(&[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(h.shape(), &[5, 16]);
        assert!(matches!(p.forward_hidden(&[0; 17]), Err(ModelError::TooLong { .. })));
        assert!(matches!(p.forward_hidden(&[20]), Err(ModelError::IdOutOfRange { id: 20, .. })));
    }

    #[test]
    fn hidden_is_causal() {
        let p = ModelParams::<f64>::init(&toy_config(4)).unwrap();
        let a = p.forward_hidden(&[5, 6, 7, 8, 9, 10]).unwrap();
        let b = p.forward_hidden(&[5, 6, 7, 19, 2, 11]).unwrap();
        for t in 0..3 {
            for (x, y) in a.row(t).iter().zip(b.row(t)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn gate_saturation() {
        let mut p = ModelParams::<f64>::init(&toy_config(5)).unwrap();
        let ex = toy_example();
        let hidden = p.forward_hidden(&[7, UNK, 9, UNK, EOS, SEP]).unwrap();
        for name in ["pointer.w_gate_h", "pointer.w_gate_c"] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        p.get_mut("pointer.b_gate").unwrap().data_mut()[0] = 20.0;
        let out = p.pointer_step(&hidden, 5, 5, ex.source_ext_ids(), 2).unwrap();
        for (w, &m) in out.mixed.iter().enumerate() {
            let want = if w < 20 { out.vocab[w] } else { 0.0 };
            assert!((m - want).abs() < 1e-6);
        }

        p.get_mut("pointer.b_gate").unwrap().data_mut()[0] = -20.0;
        let out = p.pointer_step(&hidden, 5, 5, ex.source_ext_ids(), 2).unwrap();
        let support: f64 = [7, 20, 9, 21, EOS].iter().map(|&i| out.mixed[i]).sum();
        assert!((support - 1.0).abs() < 1e-6);
        for (w, &m) in out.mixed.iter().enumerate() {
            if ![7, 20, 9, 21, EOS].contains(&w) {
                assert!(m < 1e-8);
            }
        }
    }

    #[test]
    fn singleton_source_gets_full_attention() {
        let p = ModelParams::<f64>::init(&toy_config(6)).unwrap();
        let hidden = p.forward_hidden(&[EOS, SEP]).unwrap();
        let out = p.pointer_step(&hidden, 1, 1, &[EOS], 0).unwrap();
        assert_eq!(out.attn, vec![1.0]);
    }

    #[test]
    fn pointer_step_contracts() {
        let p = ModelParams::<f64>::init(&toy_config(6)).unwrap();
        let hidden = p.forward_hidden(&[7, 8, EOS, SEP]).unwrap();
        assert!(matches!(
            p.pointer_step(&hidden, 1, 3, &[7, 8, EOS], 0),
            Err(ModelError::Contract(_))
        ));
        assert!(matches!(
            p.pointer_step(&hidden, 3, 3, &[7, 21, EOS], 1),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn gate_monotone_in_bias() {
        let mut p = ModelParams::<f64>::init(&toy_config(8)).unwrap();
        let ex = toy_example();
        let hidden = p.forward_hidden(&[7, UNK, 9, UNK, EOS, SEP, 12]).unwrap();
        let mut last = -1.0;
        for b in [-3.0, -1.0, 0.0, 0.5, 2.0] {
            p.get_mut("pointer.b_gate").unwrap().data_mut()[0] = b;
            let out = p.pointer_step(&hidden, 6, 5, ex.source_ext_ids(), 2).unwrap();
            assert!(out.p_gen > last);
            last = out.p_gen;
        }
    }

    #[test]
    fn repeated_source_word_accumulates() {
        let p = ModelParams::<f64>::init(&toy_config(10)).unwrap();
        let ext = [20, 8, 20, EOS];
        let hidden = p.forward_hidden(&[UNK, 8, UNK, EOS, SEP]).unwrap();
        let out = p.pointer_step(&hidden, 4, 4, &ext, 1).unwrap();
        let want = (1.0 - out.p_gen) * (out.attn[0] + out.attn[2]);
        assert!((out.mixed[20] - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_perfect_losses() {
        // loss bounds checked through the op the model uses
        let mut tape = Tape::<f64>::new();
        let e = 7;
        let uniform = tape.constant(&Tensor::full(vec![3, e], 1.0 / e as f64).unwrap());
        let l = tape.nll_mean(uniform, &[0, 3, 6], LOSS_FLOOR).unwrap();
        assert!((tape.value(l).data()[0] - (e as f64).ln()).abs() < 1e-12);
        let mut onehot = vec![0.0; 2 * e];
        onehot[2] = 1.0;
        onehot[e + 5] = 1.0;
        let p = tape.constant(&Tensor::new(vec![2, e], onehot).unwrap());
        let l = tape.nll_mean(p, &[2, 5], LOSS_FLOOR).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_length_checks() {
        let p = ModelParams::<f32>::init(&toy_config(11)).unwrap();
        let ex = toy_example();
        let loss = p.sequence_loss(&ex).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let mut long = ex.clone();
        long.target_ext_ids = vec![12; 12];
        assert!(matches!(p.sequence_loss(&long), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn vocab_only_head_ignores_pointer() {
        let mut cfg = toy_config(12);
        cfg.head = HeadKind::VocabOnly;
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let ex = toy_example();
        let (_, grads) = p.loss_and_grads(&ex, None).unwrap();
        for (name, g) in p.names().iter().zip(&grads) {
            if name.starts_with("pointer.") {
                assert!(g.iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let out = p.next_step(&ex.source, &[]).unwrap();
        assert_eq!(out.p_gen, 1.0);
        assert!(out.mixed[20..].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn from_named_checks_layout() {
        let p = ModelParams::<f32>::init(&toy_config(13)).unwrap();
        let named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        let q = ModelParams::from_named(p.config(), named.clone()).unwrap();
        assert_eq!(p.tensors(), q.tensors());
        let mut bad = named;
        bad.swap(0, 1);
        assert!(matches!(ModelParams::from_named(p.config(), bad), Err(ModelError::Layout(_))));
    }

    #[test]
    fn encode_then_loss_round_trip() {
        let vocab = Vocabulary::build(&["the patient has a cough"], 20, 1).unwrap();
        let ex = EncodedExample::encode("the patient has dyspnea", "dyspnea", &vocab);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            ..toy_config(14)
        };
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        assert!(p.sequence_loss(&ex).unwrap().is_finite());
        assert_eq!(ex.target_ext_ids.last(), Some(&EOS));
    }
}
