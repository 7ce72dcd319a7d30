//! Word-level tokenization, vocabulary construction and extended-id encoding.
//!
//! Source words missing from the vocabulary are embedded as `UNK` but also
//! get a per-example extended id `V + i`, so the pointer head can copy them
//! into a summary.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;

/// Surface forms of the reserved ids, in id order.
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("id {id} outside extended vocabulary of size {limit}")]
    IdOutOfRange { id: usize, limit: usize },
    #[error("vocabulary max_size must exceed the 5 specials, got {0}")]
    MaxSizeTooSmall(usize),
    #[error("vocabulary file line {line}: {msg}")]
    BadVocabFile { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases, splits on whitespace and makes every punctuation character
/// (anything neither alphanumeric nor whitespace) its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Bijective token/id mapping; ids `0..5` are the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { index, tokens }
    }

    /// Specials followed by the most frequent tokens of `corpus` (ties in
    /// lexicographic order), capped at `max_size` entries in total.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: usize) -> Result<Self, TokenizerError> {
        if max_size <= SPECIALS.len() {
            return Err(TokenizerError::MaxSizeTooSmall(max_size));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(max_size - SPECIALS.len()).map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, LF-terminated, line number = id.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.tokens {
            out.write_all(t.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let bad = |msg: &str| TokenizerError::BadVocabFile {
                line: i + 1,
                msg: msg.to_string(),
            };
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(bad("token is empty or contains whitespace"));
            }
            if line.to_lowercase() != line {
                return Err(bad("token is not lowercase"));
            }
            if i < SPECIALS.len() && line != SPECIALS[i] {
                return Err(bad(&format!("expected special {}", SPECIALS[i])));
            }
            tokens.push(line);
        }
        if tokens.len() < SPECIALS.len() {
            return Err(TokenizerError::BadVocabFile {
                line: tokens.len() + 1,
                msg: "missing special tokens".into(),
            });
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::BadVocabFile {
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::checkpoint::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Out-of-vocabulary source words in first-occurrence order; entry `i` has
/// extended id `V + i`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OovTable {
    words: Vec<String>,
}

impl OovTable {
    pub fn new(words: Vec<String>) -> Self {
        OovTable { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    fn insert(&mut self, word: &str) -> usize {
        match self.position(word) {
            Some(i) => i,
            None => {
                self.words.push(word.to_string());
                self.words.len() - 1
            }
        }
    }
}

/// Source side of an encoded pair; enough to drive decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSource {
    /// Ids `< V`, OOVs as `UNK`, EOS-terminated.
    pub ids: Vec<usize>,
    /// Same positions with OOVs replaced by their extended ids.
    pub ext_ids: Vec<usize>,
    pub oov: OovTable,
}

impl EncodedSource {
    pub fn encode(text: &str, vocab: &Vocabulary) -> Self {
        let mut oov = OovTable::default();
        let mut ids = Vec::new();
        let mut ext_ids = Vec::new();
        for tok in tokenize(text) {
            match vocab.id(&tok) {
                Some(id) => {
                    ids.push(id);
                    ext_ids.push(id);
                }
                None => {
                    ids.push(UNK);
                    ext_ids.push(vocab.len() + oov.insert(&tok));
                }
            }
        }
        ids.push(EOS);
        ext_ids.push(EOS);
        EncodedSource { ids, ext_ids, oov }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A training/evaluation unit: encoded source plus teacher-forcing targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: EncodedSource,
    /// EOS-terminated; source OOVs as extended ids, other unknowns as `UNK`.
    pub target_ext_ids: Vec<usize>,
}

impl EncodedExample {
    pub fn encode(source: &str, target: &str, vocab: &Vocabulary) -> Self {
        let source = EncodedSource::encode(source, vocab);
        let mut target_ext_ids: Vec<usize> = tokenize(target)
            .iter()
            .map(|tok| match vocab.id(tok) {
                Some(id) => id,
                None => source.oov.position(tok).map_or(UNK, |i| vocab.len() + i),
            })
            .collect();
        target_ext_ids.push(EOS);
        EncodedExample { source, target_ext_ids }
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source.ids
    }

    pub fn source_ext_ids(&self) -> &[usize] {
        &self.source.ext_ids
    }

    pub fn oov(&self) -> &OovTable {
        &self.source.oov
    }
}

/// Maps extended ids back to words joined by single spaces. `EOS` and `PAD`
/// are dropped; other specials keep their surface form (`UNK` renders as
/// `<unk>`). Original punctuation spacing is not restored.
pub fn decode(ids: &[usize], vocab: &Vocabulary, oov: &OovTable) -> Result<String, TokenizerError> {
    let limit = vocab.len() + oov.len();
    let mut words: Vec<&str> = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= limit {
            return Err(TokenizerError::IdOutOfRange { id, limit });
        }
        if id == EOS || id == PAD {
            continue;
        }
        words.push(match vocab.token(id) {
            Some(t) => t,
            None => &oov.words[id - vocab.len()],
        });
    }
    Ok(words.join(" "))
}
