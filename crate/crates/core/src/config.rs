//! Flat `key = value` run configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value   # trailing comment
//! ```
//!
//! Blank lines are ignored, keys may appear at most once, and unknown keys
//! are rejected. Missing keys take the values of [`RunConfig::default`].
//! [`RunConfig::emit`] writes every key in a fixed order, so the emitted
//! text of a parsed config is canonical.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{parse_variant, SynthKind, VariantDefaults};
use crate::error::ModelError;
use crate::model::{ModelConfig, ModelMode};
use crate::optim::AdamConfig;
use crate::task::{Task, TaskKind};
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: ModelMode,
    /// Decoder self-attention (and encoder, unless `encoder_variant` is set).
    pub variant: String,
    pub encoder_variant: Option<String>,
    pub cross_variant: String,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub share_random: bool,
    /// Factorized-dense factors; `0` picks the balanced pair for `max_len`.
    pub fd_a: usize,
    pub fd_b: usize,
    pub rank: usize,
    pub scaled: bool,
    pub mixture_learnable: bool,

    pub task: TaskKind,
    pub task_vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,

    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_batch_size: usize,
    pub early_stop: Option<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,

    pub seed: u64,
    pub data_seed: u64,
    pub dropout_seed: u64,
    pub hist_bins: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            mode: ModelMode::Decoder,
            variant: "random".into(),
            encoder_variant: None,
            cross_variant: "dot_product".into(),
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            max_len: 32,
            dropout: 0.0,
            tie_embeddings: false,
            share_random: false,
            fd_a: 0,
            fd_b: 0,
            rank: crate::attention::spec::DEFAULT_RANK,
            scaled: true,
            mixture_learnable: true,
            task: TaskKind::Copy,
            task_vocab: 16,
            seq_len: 16,
            train_size: 0,
            val_size: 256,
            steps: train.steps,
            batch_size: train.batch_size,
            eval_every: train.eval_every,
            eval_batch_size: train.eval_batch_size,
            early_stop: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            warmup: adam.warmup,
            seed: 0,
            data_seed: 1,
            dropout_seed: 2,
            hist_bins: 50,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<V: FromStr>(v: &str) -> Result<V, String>
where
    V::Err: fmt::Display,
{
    v.parse::<V>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected `true` or `false`".into()),
    }
}

fn parse_finite(v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err("must be finite".into())
    }
}

fn opt_text<D: fmt::Display>(v: &Option<D>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Names in emission order.
pub const KEYS: &[&str] = &[
    "mode",
    "variant",
    "encoder_variant",
    "cross_variant",
    "layers",
    "d_model",
    "heads",
    "ffn_dim",
    "max_len",
    "dropout",
    "tie_embeddings",
    "share_random",
    "fd_a",
    "fd_b",
    "rank",
    "scaled",
    "mixture_learnable",
    "task",
    "task_vocab",
    "seq_len",
    "train_size",
    "val_size",
    "steps",
    "batch_size",
    "eval_every",
    "eval_batch_size",
    "early_stop",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "warmup",
    "seed",
    "data_seed",
    "dropout_seed",
    "hist_bins",
    "out_dir",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|msg| ConfigError::BadValue {
                line,
                key: key.into(),
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "mode" => self.mode = ModelMode::parse(v).map_err(|e| e.to_string())?,
            "variant" => self.variant = v.into(),
            "encoder_variant" => {
                self.encoder_variant = if v == "none" { None } else { Some(v.into()) }
            }
            "cross_variant" => self.cross_variant = v.into(),
            "layers" => self.layers = parse_num(v)?,
            "d_model" => self.d_model = parse_num(v)?,
            "heads" => self.heads = parse_num(v)?,
            "ffn_dim" => self.ffn_dim = parse_num(v)?,
            "max_len" => self.max_len = parse_num(v)?,
            "dropout" => self.dropout = parse_finite(v)?,
            "tie_embeddings" => self.tie_embeddings = parse_bool(v)?,
            "share_random" => self.share_random = parse_bool(v)?,
            "fd_a" => self.fd_a = parse_num(v)?,
            "fd_b" => self.fd_b = parse_num(v)?,
            "rank" => self.rank = parse_num(v)?,
            "scaled" => self.scaled = parse_bool(v)?,
            "mixture_learnable" => self.mixture_learnable = parse_bool(v)?,
            "task" => self.task = TaskKind::parse(v).map_err(|e| e.to_string())?,
            "task_vocab" => self.task_vocab = parse_num(v)?,
            "seq_len" => self.seq_len = parse_num(v)?,
            "train_size" => self.train_size = parse_num(v)?,
            "val_size" => self.val_size = parse_num(v)?,
            "steps" => self.steps = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "eval_batch_size" => self.eval_batch_size = parse_num(v)?,
            "early_stop" => {
                self.early_stop = if v == "none" { None } else { Some(parse_finite(v)?) }
            }
            "lr" => self.lr = parse_finite(v)?,
            "beta1" => self.beta1 = parse_finite(v)?,
            "beta2" => self.beta2 = parse_finite(v)?,
            "eps" => self.eps = parse_finite(v)?,
            "warmup" => self.warmup = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "data_seed" => self.data_seed = parse_num(v)?,
            "dropout_seed" => self.dropout_seed = parse_num(v)?,
            "hist_bins" => self.hist_bins = parse_num(v)?,
            "out_dir" => {
                if v.is_empty() {
                    return Err("must not be empty".into());
                }
                self.out_dir = PathBuf::from(v)
            }
            _ => unreachable!("key list and setter agree"),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "mode" => self.mode.as_str().into(),
            "variant" => self.variant.clone(),
            "encoder_variant" => opt_text(&self.encoder_variant),
            "cross_variant" => self.cross_variant.clone(),
            "layers" => self.layers.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "max_len" => self.max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "tie_embeddings" => self.tie_embeddings.to_string(),
            "share_random" => self.share_random.to_string(),
            "fd_a" => self.fd_a.to_string(),
            "fd_b" => self.fd_b.to_string(),
            "rank" => self.rank.to_string(),
            "scaled" => self.scaled.to_string(),
            "mixture_learnable" => self.mixture_learnable.to_string(),
            "task" => self.task.as_str().into(),
            "task_vocab" => self.task_vocab.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            "early_stop" => opt_text(&self.early_stop),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "warmup" => self.warmup.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "dropout_seed" => self.dropout_seed.to_string(),
            "hist_bins" => self.hist_bins.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key list and getter agree"),
        }
    }

    /// Canonical text: every key, in [`KEYS`] order.
    pub fn emit(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.value(k)))
            .collect()
    }

    /// Checks that the model, task and optimizer settings are usable
    /// together.
    pub fn validate(&self) -> Result<(), ModelError> {
        let model = self.model_config()?;
        model.validate()?;
        let task = self.task()?;
        task.check_model(&model)?;
        let bad = |what: &str| Err(ModelError::Config(what.to_string()));
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_every == 0 {
            return bad("batch sizes and eval_every must be positive");
        }
        if self.lr <= 0.0 || self.eps <= 0.0 {
            return bad("lr and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.hist_bins == 0 {
            return bad("hist_bins must be positive");
        }
        if self.out_dir.as_os_str().is_empty() || self.out_dir.to_string_lossy().contains(['\n', '#']) {
            return bad("out_dir must be a non-empty path without `#`");
        }
        for text in [Some(&self.variant), self.encoder_variant.as_ref(), Some(&self.cross_variant)]
            .into_iter()
            .flatten()
        {
            if text.contains(['#', '\n']) {
                return bad("variant names cannot contain `#`");
            }
        }
        Ok(())
    }

    pub fn variant_defaults(&self) -> VariantDefaults {
        let mut d = VariantDefaults::for_max_len(self.max_len);
        if self.fd_a != 0 || self.fd_b != 0 {
            d.a = self.fd_a;
            d.b = self.fd_b;
        }
        d.k = self.rank;
        d.scaled = self.scaled;
        d.mixture_learnable = self.mixture_learnable;
        d
    }

    pub fn decoder_kind(&self) -> Result<SynthKind, ModelError> {
        parse_variant(&self.variant, &self.variant_defaults())
    }

    pub fn model_config(&self) -> Result<ModelConfig, ModelError> {
        let d = self.variant_defaults();
        let dec = parse_variant(&self.variant, &d)?;
        let enc = match &self.encoder_variant {
            Some(v) => parse_variant(v, &d)?,
            None => dec.clone(),
        };
        let cross = parse_variant(&self.cross_variant, &d)?;
        let mut m = ModelConfig::new(self.mode, dec);
        m.encoder_attn = enc;
        m.cross_attn = cross;
        m.layers = self.layers;
        m.d_model = self.d_model;
        m.heads = self.heads;
        m.ffn_dim = self.ffn_dim;
        m.max_len = self.max_len;
        m.vocab = self.task()?.model_vocab();
        m.dropout = self.dropout;
        m.tie_embeddings = self.tie_embeddings;
        m.share_random = self.share_random;
        Ok(m)
    }

    pub fn task(&self) -> Result<Task, ModelError> {
        let mut t = Task::new(self.task, self.task_vocab, self.seq_len, self.data_seed)?;
        t.train_size = self.train_size;
        t.val_size = self.val_size;
        t.validate()?;
        Ok(t)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            eval_batch_size: self.eval_batch_size,
            early_stop: self.early_stop,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                warmup: self.warmup,
            },
            dropout_seed: self.dropout_seed,
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub const FILE_NAME: &'static str = ".lock";

    /// Creates `dir` if needed and takes its lock file. Fails if another
    /// run holds it.
    pub fn acquire(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE_NAME);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == io::ErrorKind::AlreadyExists {
                    io::Error::new(
                        e.kind(),
                        format!("{} is locked by another run", dir.display()),
                    )
                } else {
                    e
                }
            })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
