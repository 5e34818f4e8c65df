//! Synthetic sequence tasks and their batch layouts.
//!
//! Token ids: `0` is padding, `1` separates source from target in
//! decoder-only layouts, and data symbols start at `2`. A task over `V`
//! symbols therefore needs a model vocabulary of `V + 2`.
//!
//! Layouts for a source `x` and target `y` of length `L`:
//!
//! * decoder: input `[x₁..x_L, SEP, y₁..y_{L-1}]`, targets shifted by one,
//!   scored on the last `L` positions;
//! * enc_dec: encoder input `x`, decoder input `[SEP, y₁..y_{L-1}]`,
//!   targets `y`;
//! * encoder: input `x`, targets `y` position by position.
//!
//! `char_lm` is next-character prediction over a bundled public-domain text
//! (the Gettysburg Address, the Preamble to the US Constitution and the
//! opening of the Declaration of Independence) and runs in decoder mode only.

use std::sync::OnceLock;

use rand::Rng;

use crate::error::ModelError;
use crate::model::{Batch, ModelConfig, ModelMode, Tokens, PAD_ID};
use crate::rng::{stream_id, stream_rng};

type Result<T> = std::result::Result<T, ModelError>;

pub const SEP_ID: u32 = 1;
/// Id of the first data symbol.
pub const FIRST_SYMBOL: u32 = 2;

const CORPUS: &str = include_str!("../data/corpus.txt");
/// Fraction of the corpus used for training; the tail is validation.
const TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    CharLm,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::CharLm => "char_lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "sort" => TaskKind::Sort,
            "char_lm" => TaskKind::CharLm,
            other => return Err(ModelError::Config(format!("unknown task `{other}`"))),
        })
    }

    /// Target sequence for a source sequence (sequence tasks only).
    pub fn target(self, source: &[u32]) -> Vec<u32> {
        match self {
            TaskKind::Copy | TaskKind::CharLm => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = source.to_vec();
                t.sort_unstable();
                t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One source/target pair in token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// How accuracy is measured on a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    /// Feed the model its own argmax predictions.
    Greedy,
    /// Argmax at every position given the true prefix.
    TeacherForced,
}

/// Characters of the bundled corpus, sorted; symbol `i` is id `i + 2`.
pub fn corpus_alphabet() -> &'static [char] {
    static ALPHABET: OnceLock<Vec<char>> = OnceLock::new();
    ALPHABET.get_or_init(|| {
        let mut cs: Vec<char> = CORPUS.chars().collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    })
}

fn corpus_ids() -> &'static [u32] {
    static IDS: OnceLock<Vec<u32>> = OnceLock::new();
    IDS.get_or_init(|| {
        let alphabet = corpus_alphabet();
        CORPUS
            .chars()
            .map(|c| FIRST_SYMBOL + alphabet.binary_search(&c).expect("alphabet covers corpus") as u32)
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub kind: TaskKind,
    /// Number of data symbols (for `char_lm`, the corpus alphabet size).
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Distinct training examples; `0` draws a fresh example every time.
    pub train_size: usize,
    pub val_size: usize,
}

impl Task {
    /// A task with an unbounded training stream and 256 validation
    /// examples. `vocab` is ignored for `char_lm`.
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let vocab = if kind == TaskKind::CharLm {
            corpus_alphabet().len()
        } else {
            vocab
        };
        let task = Self {
            kind,
            vocab,
            seq_len,
            seed,
            train_size: 0,
            val_size: 256,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.seq_len == 0 || self.val_size == 0 {
            return Err(ModelError::Config(
                "task vocab, seq_len and val_size must be positive".into(),
            ));
        }
        if self.kind == TaskKind::CharLm {
            if self.vocab != corpus_alphabet().len() {
                return Err(ModelError::Config(format!(
                    "char_lm vocab is fixed at {}",
                    corpus_alphabet().len()
                )));
            }
            let val_len = corpus_ids().len() - self.split_start(Split::Val);
            if self.seq_len + 1 > val_len {
                return Err(ModelError::Config(format!(
                    "char_lm seq_len {} exceeds the validation text ({val_len} chars)",
                    self.seq_len
                )));
            }
        }
        Ok(())
    }

    /// Vocabulary size the model needs (symbols plus pad and separator).
    pub fn model_vocab(&self) -> usize {
        self.vocab + FIRST_SYMBOL as usize
    }

    /// Longest sequence the model sees in `mode`.
    pub fn required_len(&self, mode: ModelMode) -> usize {
        match (self.kind, mode) {
            (TaskKind::CharLm, _) | (_, ModelMode::Encoder | ModelMode::EncDec) => self.seq_len,
            (_, ModelMode::Decoder) => 2 * self.seq_len,
        }
    }

    /// Checks that a model can run this task.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.kind == TaskKind::CharLm && config.mode != ModelMode::Decoder {
            return Err(ModelError::Config("char_lm needs a decoder-only model".into()));
        }
        let need = self.required_len(config.mode);
        if need > config.max_len {
            return Err(ModelError::MaxLengthExceeded {
                len: need,
                max_len: config.max_len,
            });
        }
        if config.vocab < self.model_vocab() {
            return Err(ModelError::Config(format!(
                "model vocab {} is smaller than the task's {}",
                config.vocab,
                self.model_vocab()
            )));
        }
        Ok(())
    }

    pub fn decoding(&self, mode: ModelMode) -> Decoding {
        match (self.kind, mode) {
            (TaskKind::CharLm, _) | (_, ModelMode::Encoder) => Decoding::TeacherForced,
            _ => Decoding::Greedy,
        }
    }

    fn split_start(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => (corpus_ids().len() as f64 * TRAIN_FRACTION) as usize,
        }
    }

    /// Example `index` of `split`, a pure function of `(seed, split, index)`.
    pub fn example(&self, split: Split, index: usize) -> Example {
        let index = match split {
            Split::Train if self.train_size > 0 => index % self.train_size,
            Split::Val => index % self.val_size,
            _ => index,
        };
        let stream = stream_id(split.as_str()).wrapping_add(index as u64);
        let mut rng = stream_rng(self.seed, stream);
        match self.kind {
            TaskKind::CharLm => {
                let ids = corpus_ids();
                let (lo, hi) = match split {
                    Split::Train => (0, self.split_start(Split::Val)),
                    Split::Val => (self.split_start(Split::Val), ids.len()),
                };
                let span = self.seq_len + 1;
                let start = lo + rng.random_range(0..=(hi - lo).saturating_sub(span));
                let window = &ids[start..start + span];
                Example {
                    source: window[..self.seq_len].to_vec(),
                    target: window[1..].to_vec(),
                }
            }
            kind => {
                let top = FIRST_SYMBOL + self.vocab as u32;
                let source: Vec<u32> = (0..self.seq_len).map(|_| rng.random_range(FIRST_SYMBOL..top)).collect();
                Example {
                    target: kind.target(&source),
                    source,
                }
            }
        }
    }

    /// Examples `start..start + count` of `split`.
    pub fn generate(&self, split: Split, start: usize, count: usize) -> Vec<Example> {
        (start..start + count).map(|i| self.example(split, i)).collect()
    }

    /// Lays examples out as a batch for `mode`.
    pub fn batch(&self, mode: ModelMode, examples: &[Example]) -> Result<Batch> {
        if examples.is_empty() {
            return Err(ModelError::Config("a batch needs at least one example".into()));
        }
        let n = examples.len();
        let l = self.seq_len;
        if self.kind == TaskKind::CharLm {
            let ids = examples.iter().flat_map(|e| e.source.iter().copied()).collect();
            return Ok(Batch {
                src: None,
                input: Tokens::new(n, l, ids)?,
                targets: examples.iter().flat_map(|e| e.target.iter().copied()).collect(),
                target_mask: vec![true; n * l],
            });
        }
        Ok(match mode {
            ModelMode::Encoder => Batch {
                src: None,
                input: Tokens::new(n, l, examples.iter().flat_map(|e| e.source.clone()).collect())?,
                targets: examples.iter().flat_map(|e| e.target.clone()).collect(),
                target_mask: vec![true; n * l],
            },
            ModelMode::EncDec => {
                let mut input = Vec::with_capacity(n * l);
                for e in examples {
                    input.push(SEP_ID);
                    input.extend_from_slice(&e.target[..l - 1]);
                }
                Batch {
                    src: Some(Tokens::new(n, l, examples.iter().flat_map(|e| e.source.clone()).collect())?),
                    input: Tokens::new(n, l, input)?,
                    targets: examples.iter().flat_map(|e| e.target.clone()).collect(),
                    target_mask: vec![true; n * l],
                }
            }
            ModelMode::Decoder => {
                let len = 2 * l;
                let (mut input, mut targets, mut mask) =
                    (Vec::with_capacity(n * len), Vec::with_capacity(n * len), Vec::with_capacity(n * len));
                for e in examples {
                    let mut seq = e.source.clone();
                    seq.push(SEP_ID);
                    seq.extend_from_slice(&e.target);
                    input.extend_from_slice(&seq[..len]);
                    targets.extend_from_slice(&seq[1..]);
                    mask.extend((0..len).map(|p| p >= l));
                }
                Batch {
                    src: None,
                    input: Tokens::new(n, len, input)?,
                    targets,
                    target_mask: mask,
                }
            }
        })
    }

    /// Training batch for optimizer step `step` (a pure function of the
    /// task seed and `step`).
    pub fn train_batch(&self, mode: ModelMode, step: u64, batch_size: usize) -> Result<Batch> {
        let start = step as usize * batch_size;
        self.batch(mode, &self.generate(Split::Train, start, batch_size))
    }

    /// The whole validation split in batches of at most `batch_size`.
    pub fn val_batches(&self, mode: ModelMode, batch_size: usize) -> Result<Vec<Batch>> {
        let bs = batch_size.max(1);
        (0..self.val_size)
            .step_by(bs)
            .map(|start| {
                let count = bs.min(self.val_size - start);
                self.batch(mode, &self.generate(Split::Val, start, count))
            })
            .collect()
    }
}

/// Right-pads every sequence of a batch with `extra` pad positions that are
/// never scored.
pub fn pad_batch(batch: &Batch, extra: usize) -> Result<Batch> {
    let pad = |t: &Tokens| -> Result<Tokens> {
        let mut ids = Vec::with_capacity(t.batch * (t.len + extra));
        for b in 0..t.batch {
            ids.extend_from_slice(t.row(b));
            ids.extend(std::iter::repeat_n(PAD_ID, extra));
        }
        Tokens::new(t.batch, t.len + extra, ids)
    };
    let (n, len) = (batch.input.batch, batch.input.len);
    let mut targets = Vec::with_capacity(n * (len + extra));
    let mut mask = Vec::with_capacity(n * (len + extra));
    for b in 0..n {
        targets.extend_from_slice(&batch.targets[b * len..(b + 1) * len]);
        targets.extend(std::iter::repeat_n(PAD_ID, extra));
        mask.extend_from_slice(&batch.target_mask[b * len..(b + 1) * len]);
        mask.extend(std::iter::repeat_n(false, extra));
    }
    Ok(Batch {
        src: batch.src.as_ref().map(pad).transpose()?,
        input: pad(&batch.input)?,
        targets,
        target_mask: mask,
    })
}
