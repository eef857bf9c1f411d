//! Synthetic sequence tasks.
//!
//! Copy and reverse examples are laid out for a causal model as
//! `[payload, SEP, answer without its last token]`: the position holding
//! `SEP` predicts the first answer token, and every following position
//! predicts the next one. Only answer positions are scored. Char-LM
//! sequences come from a seeded sparse bigram grammar and score every
//! next-token prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tensor::RngState;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
/// First id available to payload symbols.
pub const FIRST_SYMBOL: usize = 2;
/// Successors each symbol may take in the char-LM grammar.
const GRAMMAR_FANOUT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    CharLm,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::CharLm => "char-lm",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "char-lm" | "char_lm" => Ok(TaskKind::CharLm),
            _ => Err(Error::Parameter(format!("unknown task {s:?}"))),
        }
    }
}

/// One example: the task-level input and target, plus the model sequence
/// built from them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Packs examples `range` into a model batch.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<TokenBatch> {
        pack(&self.examples[range], self.seq_len)
    }
}

pub fn pack(examples: &[Example], seq_len: usize) -> Result<TokenBatch> {
    let tokens = examples.iter().flat_map(|e| e.tokens.iter().copied()).collect();
    let targets = examples.iter().flat_map(|e| e.targets.iter().copied()).collect();
    TokenBatch::new(tokens, targets, examples.len(), seq_len)
}

/// Bigram successor table: `GRAMMAR_FANOUT` successors per symbol with
/// unnormalized weights.
#[derive(Clone, Debug)]
struct Grammar {
    successors: Vec<Vec<(usize, f64)>>,
}

impl Grammar {
    fn new(vocab: usize, rng: &mut RngState) -> Self {
        let symbols = vocab - FIRST_SYMBOL;
        let successors = (0..symbols)
            .map(|_| {
                (0..GRAMMAR_FANOUT.min(symbols))
                    .map(|_| (FIRST_SYMBOL + rng.below(symbols), 0.1 + rng.uniform()))
                    .collect()
            })
            .collect();
        Self { successors }
    }

    fn next(&self, current: usize, rng: &mut RngState) -> usize {
        let options = &self.successors[current - FIRST_SYMBOL];
        let total: f64 = options.iter().map(|o| o.1).sum();
        let mut u = rng.uniform() * total;
        for &(tok, w) in options {
            if u < w {
                return tok;
            }
            u -= w;
        }
        options.last().expect("non-empty").0
    }
}

/// A deterministic stream of examples for one task.
#[derive(Clone, Debug)]
pub struct TaskStream {
    kind: TaskKind,
    vocab: usize,
    seq_len: usize,
    grammar: Option<Grammar>,
    rng: RngState,
}

/// Stream reserved for the char-LM grammar, shared by every split.
const GRAMMAR_STREAM: u64 = u64::MAX;

impl TaskStream {
    /// `seed` fixes the grammar; `stream` selects an independent split.
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize, seed: u64, stream: u64) -> Result<Self> {
        if vocab < 4 {
            return Err(Error::Parameter(format!("vocab must be >= 4, got {vocab}")));
        }
        if seq_len < 4 {
            return Err(Error::Parameter(format!("sequence length must be >= 4, got {seq_len}")));
        }
        let grammar = (kind == TaskKind::CharLm)
            .then(|| Grammar::new(vocab, &mut RngState::with_stream(seed, GRAMMAR_STREAM)));
        Ok(Self {
            kind,
            vocab,
            seq_len,
            grammar,
            rng: RngState::with_stream(seed, stream),
        })
    }

    pub fn next_example(&mut self) -> Example {
        let symbols = self.vocab - FIRST_SYMBOL;
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let p = self.seq_len / 2;
                let input: Vec<usize> = (0..p).map(|_| FIRST_SYMBOL + self.rng.below(symbols)).collect();
                let target: Vec<usize> = if self.kind == TaskKind::Copy {
                    input.clone()
                } else {
                    input.iter().rev().copied().collect()
                };
                let mut tokens = input.clone();
                tokens.push(SEP);
                tokens.extend_from_slice(&target[..p - 1]);
                let mut targets = vec![None; p];
                targets.extend(target.iter().map(|&t| Some(t)));
                if self.seq_len % 2 == 1 {
                    tokens.push(PAD);
                    targets.push(None);
                }
                Example {
                    input,
                    target,
                    tokens,
                    targets,
                }
            }
            TaskKind::CharLm => {
                let grammar = self.grammar.as_ref().expect("char-lm streams carry a grammar");
                let mut seq = vec![FIRST_SYMBOL + self.rng.below(symbols)];
                while seq.len() <= self.seq_len {
                    let next = grammar.next(*seq.last().expect("non-empty"), &mut self.rng);
                    seq.push(next);
                }
                let input = seq[..self.seq_len].to_vec();
                let target = seq[1..].to_vec();
                Example {
                    tokens: input.clone(),
                    targets: target.iter().map(|&t| Some(t)).collect(),
                    input,
                    target,
                }
            }
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Result<TokenBatch> {
        let examples: Vec<Example> = (0..batch).map(|_| self.next_example()).collect();
        pack(&examples, self.seq_len)
    }
}

pub fn gen_task(kind: TaskKind, vocab: usize, seq_len: usize, n_examples: usize, seed: u64) -> Result<Dataset> {
    let mut stream = TaskStream::new(kind, vocab, seq_len, seed, 0)?;
    Ok(Dataset {
        kind,
        vocab,
        seq_len,
        examples: (0..n_examples).map(|_| stream.next_example()).collect(),
    })
}
