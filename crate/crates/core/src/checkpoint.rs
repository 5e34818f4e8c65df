//! Binary checkpoints of a training run.
//!
//! Layout:
//!
//! | bytes            | content                                        |
//! |------------------|------------------------------------------------|
//! | 8                | magic `SYNTHCKP`                               |
//! | 8                | header length `h`, u64 little-endian           |
//! | `h`              | JSON [`Header`], UTF-8                         |
//! | `8·payload_len`  | every tensor, f64 little-endian, manifest order |
//!
//! The header records the SHA-256 of the payload, so a truncated or
//! damaged file is rejected instead of yielding wrong parameters. Tensors
//! are named `param/{name}`, `adam.m/{name}` and `adam.v/{name}`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::error::ModelError;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"SYNTHCKP";
pub const VERSION: u32 = 1;

/// Keys that may differ between a checkpoint and the config resuming it.
/// None of them affect parameter values.
pub const RESUMABLE_KEYS: &[&str] = &["steps", "eval_every", "eval_batch_size", "early_stop", "hist_bins", "out_dir"];

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("config mismatch on `{key}`: checkpoint has `{saved}`, run has `{given}`")]
    ConfigMismatch { key: String, saved: String, given: String },
    #[error("checkpoint does not match the model: {0}")]
    Tensors(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything the training loop draws randomness from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub data_seed: u64,
    pub dropout_seed: u64,
    /// Step counter selecting the next data and dropout streams.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Element type of the model that wrote the file.
    pub scalar: String,
    /// Emitted run config.
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    /// Wall-clock seconds spent training so far.
    pub secs: f64,
    pub tensors: Vec<TensorEntry>,
    /// Number of f64 values in the payload.
    pub payload_len: u64,
    /// Lower-case hex SHA-256 of the payload bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub payload: Vec<f64>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    /// Snapshot of a trainer's parameters, optimizer state and counters.
    pub fn capture<T: Scalar>(trainer: &Trainer<T>, config: &RunConfig) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, t: &Tensor<T>| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
            });
            payload.extend(t.data().iter().map(|x| x.to_f64_lossy()));
        };
        for (_, p) in trainer.model.store.iter() {
            push(format!("param/{}", p.name), &p.value);
        }
        for (name, (m, v)) in &trainer.optim.moments {
            push(format!("adam.m/{name}"), m);
            push(format!("adam.v/{name}"), v);
        }
        let step = trainer.step();
        let header = Header {
            version: VERSION,
            scalar: T::NAME.into(),
            config: config.emit(),
            step,
            rng: RngState {
                seed: config.seed,
                data_seed: config.data_seed,
                dropout_seed: config.dropout_seed,
                step,
            },
            secs: trainer.elapsed(),
            tensors,
            payload_len: payload.len() as u64,
            sha256: hex_digest(&payload_bytes(&payload)),
        };
        Self { header, payload }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload_bytes(&self.payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let truncated = || CheckpointError::Checksum("file is truncated".into());
        let len_bytes: [u8; 8] = bytes.get(8..16).ok_or_else(truncated)?.try_into().expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
        let header_end = 16usize.checked_add(header_len).ok_or_else(truncated)?;
        let header_bytes = bytes.get(16..header_end).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.version != VERSION {
            return Err(CheckpointError::Version { found: header.version });
        }
        let body = &bytes[header_end..];
        let expected = header.payload_len.checked_mul(8).ok_or_else(truncated)?;
        if body.len() as u64 != expected {
            return Err(CheckpointError::Checksum(format!(
                "payload is {} bytes, header declares {expected}",
                body.len()
            )));
        }
        if hex_digest(body) != header.sha256 {
            return Err(CheckpointError::Checksum("payload hash does not match header".into()));
        }
        let declared: u64 = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum();
        if declared != header.payload_len {
            return Err(CheckpointError::Header(format!(
                "manifest covers {declared} values, payload has {}",
                header.payload_len
            )));
        }
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { header, payload })
    }

    /// Writes through a temporary file and a rename, so readers never see
    /// a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig::parse(&self.header.config)?)
    }

    /// Named tensors in manifest order.
    pub fn tensors(&self) -> BTreeMap<&str, (&[usize], &[f64])> {
        let mut out = BTreeMap::new();
        let mut at = 0;
        for t in &self.header.tensors {
            let n: usize = t.shape.iter().product();
            out.insert(t.name.as_str(), (t.shape.as_slice(), &self.payload[at..at + n]));
            at += n;
        }
        out
    }

    /// Errors unless `config` describes the same run, up to
    /// [`RESUMABLE_KEYS`].
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        let saved = self.run_config()?;
        let lines = |c: &RunConfig| -> BTreeMap<String, String> {
            c.emit()
                .lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        let (a, b) = (lines(&saved), lines(config));
        for (key, saved) in &a {
            if RESUMABLE_KEYS.contains(&key.as_str()) {
                continue;
            }
            let given = b.get(key).cloned().unwrap_or_default();
            if *saved != given {
                return Err(CheckpointError::ConfigMismatch {
                    key: key.clone(),
                    saved: saved.clone(),
                    given,
                });
            }
        }
        Ok(())
    }

    /// Model with the checkpoint's parameters.
    pub fn model<T: Scalar>(&self, config: &RunConfig) -> Result<Model<T>> {
        self.check_config(config)?;
        let mut model = Model::new(config.model_config()?, config.seed)?;
        let tensors = self.tensors();
        let expected = model.store.len() + 2 * model.store.iter().filter(|(_, p)| !p.frozen).count();
        if tensors.len() != expected {
            return Err(CheckpointError::Tensors(format!(
                "{} tensors stored, model needs {expected}",
                tensors.len()
            )));
        }
        for p in model.store.iter_mut() {
            fill(&tensors, &format!("param/{}", p.name), &mut p.value)?;
        }
        Ok(model)
    }

    /// Trainer positioned exactly where the checkpoint was taken.
    pub fn trainer<T: Scalar>(&self, config: &RunConfig) -> Result<Trainer<T>> {
        let model = self.model(config)?;
        let mut trainer = Trainer::new(model, config.task()?, config.train_config())?;
        let tensors = self.tensors();
        for (name, (m, v)) in trainer.optim.moments.iter_mut() {
            fill(&tensors, &format!("adam.m/{name}"), m)?;
            fill(&tensors, &format!("adam.v/{name}"), v)?;
        }
        trainer.optim.step = self.header.step;
        trainer.secs_offset = self.header.secs;
        Ok(trainer)
    }
}

fn fill<T: Scalar>(tensors: &BTreeMap<&str, (&[usize], &[f64])>, name: &str, into: &mut Tensor<T>) -> Result<()> {
    let (shape, data) = tensors
        .get(name)
        .ok_or_else(|| CheckpointError::Tensors(format!("missing tensor `{name}`")))?;
    if *shape != into.shape() {
        return Err(CheckpointError::Tensors(format!(
            "`{name}` has shape {shape:?}, model expects {:?}",
            into.shape()
        )));
    }
    for (dst, &src) in into.data_mut().iter_mut().zip(data.iter()) {
        *dst = T::from_f64_lossy(src);
    }
    Ok(())
}
