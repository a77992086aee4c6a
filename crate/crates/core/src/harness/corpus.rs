//! Text corpora and the seeded window sampler.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Maps text to token ids.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    /// One token per byte; vocabulary 256.
    Bytes,
    /// Greedy longest match against a fixed list of tokens.
    Vocab { tokens: Vec<Vec<u8>>, lookup: HashMap<Vec<u8>, u32>, longest: usize },
}

impl Tokenizer {
    /// Loads a vocabulary file: one token per line, with `\n`, `\t` and `\\` escapes.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut tok = Vec::new();
            let mut bytes = line.bytes();
            while let Some(b) = bytes.next() {
                if b != b'\\' {
                    tok.push(b);
                    continue;
                }
                match bytes.next() {
                    Some(b'n') => tok.push(b'\n'),
                    Some(b't') => tok.push(b'\t'),
                    Some(b'\\') => tok.push(b'\\'),
                    other => {
                        return Err(Error::config(format!(
                            "{}:{}: bad escape {:?}",
                            path.display(),
                            i + 1,
                            other.map(char::from)
                        )))
                    }
                }
            }
            if tok.is_empty() {
                return Err(Error::config(format!("{}:{}: empty token", path.display(), i + 1)));
            }
            tokens.push(tok);
        }
        Tokenizer::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry {:?}", String::from_utf8_lossy(t))));
            }
        }
        let longest = tokens.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Tokenizer::Vocab { tokens, lookup, longest })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Vocab { tokens, .. } => tokens.len(),
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Bytes => Ok(bytes.iter().map(|&b| b as u32).collect()),
            Tokenizer::Vocab { lookup, longest, .. } => {
                let mut out = Vec::new();
                let mut i = 0;
                'outer: while i < bytes.len() {
                    for len in (1..=(*longest).min(bytes.len() - i)).rev() {
                        if let Some(&id) = lookup.get(&bytes[i..i + len]) {
                            out.push(id);
                            i += len;
                            continue 'outer;
                        }
                    }
                    return Err(Error::invalid(format!("byte {:#04x} at offset {i} is not covered by the vocabulary", bytes[i])));
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        match self {
            Tokenizer::Bytes => ids.iter().map(|&i| i as u8).collect(),
            Tokenizer::Vocab { tokens, .. } => ids.iter().flat_map(|&i| tokens[i as usize].iter().copied()).collect(),
        }
    }
}

/// A tokenized text with a held-out tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
    pub vocab_size: usize,
}

/// `batch` windows of `seq_len` inputs and their next-token targets, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Corpus {
    /// Splits off the last `heldout_frac` of the tokens for evaluation.
    pub fn new(tokens: Vec<u32>, vocab_size: usize, heldout_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&heldout_frac) {
            return Err(Error::config(format!("heldout fraction {heldout_frac} outside [0, 1)")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::invalid(format!("token {bad} outside vocabulary of {vocab_size}")));
        }
        let cut = tokens.len() - (tokens.len() as f64 * heldout_frac).round() as usize;
        let mut train = tokens;
        let heldout = train.split_off(cut);
        Ok(Corpus { train, heldout, vocab_size })
    }

    pub fn from_file(path: &Path, tokenizer: &Tokenizer, heldout_frac: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Corpus::new(tokenizer.encode(&bytes)?, tokenizer.vocab_size(), heldout_frac)
    }

    /// `count` evenly spaced held-out windows (deterministic, no randomness).
    pub fn heldout_batches(&self, seq_len: usize, count: usize, batch: usize) -> Result<Vec<Batch>> {
        windows_evenly(&self.heldout, seq_len, count, batch)
    }
}

fn windows_evenly(tokens: &[u32], seq_len: usize, count: usize, batch: usize) -> Result<Vec<Batch>> {
    if tokens.len() < seq_len + 1 || count == 0 || batch == 0 {
        return Err(Error::config(format!(
            "cannot cut {count} windows of {} tokens from {} tokens",
            seq_len + 1,
            tokens.len()
        )));
    }
    let span = tokens.len() - seq_len - 1;
    let starts: Vec<usize> = (0..count).map(|i| if count == 1 { 0 } else { i * span / (count - 1) }).collect();
    Ok(starts.chunks(batch).map(|c| make_batch(tokens, c, seq_len)).collect())
}

fn make_batch(tokens: &[u32], starts: &[usize], seq_len: usize) -> Batch {
    let mut inputs = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        inputs.extend_from_slice(&tokens[s..s + seq_len]);
        targets.extend_from_slice(&tokens[s + 1..s + seq_len + 1]);
    }
    Batch { inputs, targets, batch: starts.len(), seq_len }
}

/// Random windows of the training split drawn from a seeded ChaCha8 stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    rng: ChaCha8Rng,
    seq_len: usize,
    batch: usize,
}

impl Sampler {
    pub fn new(corpus: &Corpus, seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if corpus.train.len() < seq_len + 1 || batch == 0 || seq_len == 0 {
            return Err(Error::config(format!(
                "training split of {} tokens cannot supply windows of {}",
                corpus.train.len(),
                seq_len + 1
            )));
        }
        Ok(Sampler { rng: ChaCha8Rng::seed_from_u64(seed), seq_len, batch })
    }

    pub fn next_batch(&mut self, corpus: &Corpus) -> Batch {
        let hi = corpus.train.len() - self.seq_len;
        let starts: Vec<usize> = (0..self.batch).map(|_| self.rng.random_range(0..hi)).collect();
        make_batch(&corpus.train, &starts, self.seq_len)
    }
}
