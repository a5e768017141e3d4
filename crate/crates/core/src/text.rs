//! Corpus ingestion, vocabulary, tokenization and padded batches.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

/// Splits raw text into word pieces.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on whitespace.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }
}

/// Bijective token/id mapping. Ids 0–4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary of the special tokens followed by `words` in order.
    pub fn from_tokens<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into)) {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {tok:?}")));
            }
            if vocab.index.insert(tok.clone(), vocab.tokens.len()).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Keeps the `max_size` most frequent tokens seen at least
    /// `min_frequency` times. Ties go to the lexicographically smaller token.
    pub fn from_lines<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        tokenizer: &dyn Tokenizer,
        min_frequency: usize,
        max_size: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for line in lines {
            for tok in tokenizer.tokenize(line) {
                seen_any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Vocab("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_frequency && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Self::from_tokens(ranked.into_iter().map(|(tok, _)| tok))
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for tok in &self.tokens {
            writeln!(out, "{tok}").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    detail: format!("expected special token {special}"),
                });
            }
        }
        Self::from_tokens(lines[NUM_SPECIAL..].iter().copied())
    }
}

/// Reads a one-sentence-per-line corpus, skipping blank lines.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn build_vocab(corpus_path: &Path, min_frequency: usize, max_size: usize) -> Result<Vocab> {
    let lines = read_corpus(corpus_path)?;
    Vocab::from_lines(lines.iter().map(String::as_str), &WhitespaceTokenizer, min_frequency, max_size)
}

/// Token ids framed by `[CLS]` … `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != CLS || ids[ids.len() - 1] != SEP {
            return Err(Error::Vocab(format!("sequence must be framed by [CLS] … [SEP]: {ids:?}")));
        }
        Ok(TokenSequence(ids))
    }

    /// Wraps ids without validating the frame; used for corrupted copies.
    pub(crate) fn from_raw(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Positions holding a non-special token.
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| !is_special(self.0[i])).collect()
    }
}

pub fn encode_with(tokenizer: &dyn Tokenizer, text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let body = max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(max_len.min(64));
    ids.push(CLS);
    ids.extend(
        tokenizer
            .tokenize(text)
            .iter()
            .take(body)
            .map(|t| vocab.id(t).unwrap_or(UNK)),
    );
    ids.push(SEP);
    TokenSequence(ids)
}

pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    encode_with(&WhitespaceTokenizer, text, vocab, max_len)
}

/// Space-joined tokens. `[PAD]`, `[CLS]` and `[SEP]` are dropped; `[UNK]`
/// and `[MASK]` render literally.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range for vocabulary of {}", vocab.len())))?;
        if !matches!(id, PAD | CLS | SEP) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

/// A padded batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub len: usize,
}

impl Batch {
    /// Pads every sequence to the longest one with `[PAD]`.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        Self::from_id_slices(seqs.into_iter().map(|s| s.ids()).collect::<Vec<_>>().as_slice(), None)
    }

    /// Pads to `len` (or the longest slice if `None`).
    pub fn from_id_slices(seqs: &[&[usize]], len: Option<usize>) -> Self {
        let len = len.unwrap_or_else(|| seqs.iter().map(|s| s.len()).max().unwrap_or(0));
        let mut ids = vec![PAD; seqs.len() * len];
        let mut attention_mask = vec![false; seqs.len() * len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            assert!(s.len() <= len, "sequence longer than padded length");
            ids[b * len..b * len + s.len()].copy_from_slice(s);
            attention_mask[b * len..b * len + s.len()].fill(true);
            lengths.push(s.len());
        }
        Batch {
            ids,
            attention_mask,
            lengths,
            len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }
}

/// Shuffles `sequences` with `rng` and groups them into padded batches.
/// The final batch may be smaller.
pub fn make_batches<R: Rng + ?Sized>(sequences: &[TokenSequence], batch_size: usize, rng: &mut R) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_sequences(chunk.iter().map(|&i| &sequences[i])))
        .collect()
}
