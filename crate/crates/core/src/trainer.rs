//! Training loop, evaluation and metric logging.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{Batch, Model, Tokens, PAD_ID};
use crate::optim::{Adam, AdamConfig, NonFiniteGradient};
use crate::rng::{stream_id, stream_rng};
use crate::scalar::Scalar;
use crate::task::{Decoding, Task};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gradient(#[from] NonFiniteGradient),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Evaluation metrics over a set of batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Teacher-forced mean negative log-likelihood per scored token.
    pub loss: f64,
    pub ppl: f64,
    pub tok_acc: f64,
    pub seq_acc: f64,
}

/// One line of the metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub ppl: f64,
    pub tok_acc: f64,
    pub seq_acc: f64,
    /// Wall-clock seconds since the run started.
    pub secs: f64,
}

impl MetricRecord {
    pub fn new(step: u64, m: Metrics, secs: f64) -> Self {
        Self {
            step,
            loss: m.loss,
            ppl: m.ppl,
            tok_acc: m.tok_acc,
            seq_acc: m.seq_acc,
            secs,
        }
    }

    /// Optimizer steps per wall-clock second up to this record.
    pub fn steps_per_sec(&self) -> f64 {
        if self.secs > 0.0 {
            self.step as f64 / self.secs
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Evaluation records in step order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json() + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Predicted token at every position of `batch` (`PAD_ID` where unscored).
///
/// Greedy decoding walks scored positions left to right, feeding each
/// prediction in as the next input token; it relies on causality, so each
/// step only runs the prefix up to the position being predicted.
pub fn predictions<T: Scalar>(model: &Model<T>, batch: &Batch, decoding: Decoding) -> std::result::Result<Vec<u32>, ModelError> {
    let (n, len) = (batch.input.batch, batch.input.len);
    let vocab = model.config.vocab;
    let mut preds = vec![PAD_ID; n * len];
    match decoding {
        Decoding::TeacherForced => {
            let (logits, _) = model.infer(batch, false)?;
            for (i, row) in logits.data().chunks(vocab).enumerate() {
                if batch.target_mask[i] {
                    preds[i] = argmax(row);
                }
            }
        }
        Decoding::Greedy => {
            let mut ids = batch.input.ids.clone();
            for p in 0..len {
                if !(0..n).any(|b| batch.target_mask[b * len + p]) {
                    continue;
                }
                let prefix: Vec<u32> = (0..n).flat_map(|b| ids[b * len..b * len + p + 1].iter().copied()).collect();
                let step = Batch {
                    src: batch.src.clone(),
                    input: Tokens::new(n, p + 1, prefix)?,
                    targets: Vec::new(),
                    target_mask: Vec::new(),
                };
                let (logits, _) = model.infer(&step, false)?;
                for b in 0..n {
                    if !batch.target_mask[b * len + p] {
                        continue;
                    }
                    let at = (b * (p + 1) + p) * vocab;
                    let pred = argmax(&logits.data()[at..at + vocab]);
                    preds[b * len + p] = pred;
                    if p + 1 < len && ids[b * len + p + 1] != PAD_ID {
                        ids[b * len + p + 1] = pred;
                    }
                }
            }
        }
    }
    Ok(preds)
}

/// Accuracy counts of predictions against a batch's scored targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accuracy {
    pub tokens: usize,
    pub tokens_right: usize,
    /// Sequences with at least one scored position.
    pub seqs: usize,
    pub seqs_right: usize,
}

impl Accuracy {
    pub fn of(preds: &[u32], batch: &Batch) -> Self {
        let len = batch.input.len;
        let mut a = Accuracy::default();
        for b in 0..batch.input.batch {
            let (mut any, mut all) = (false, true);
            for i in b * len..(b + 1) * len {
                if batch.target_mask[i] {
                    any = true;
                    a.tokens += 1;
                    if preds[i] == batch.targets[i] {
                        a.tokens_right += 1;
                    } else {
                        all = false;
                    }
                }
            }
            if any {
                a.seqs += 1;
                a.seqs_right += all as usize;
            }
        }
        a
    }
}

/// Loss, perplexity and accuracies of `model` over `batches`. Only scored
/// positions count; padding never does.
pub fn evaluate<T: Scalar>(model: &Model<T>, batches: &[Batch], decoding: Decoding) -> std::result::Result<Metrics, ModelError> {
    let (mut nll, mut scored, mut correct) = (0.0, 0usize, 0usize);
    let (mut seqs, mut seqs_right) = (0usize, 0usize);
    for batch in batches {
        let n = batch.scored();
        if n == 0 {
            continue;
        }
        nll += model.eval_loss(batch)?.to_f64_lossy() * n as f64;
        scored += n;
        let preds = predictions(model, batch, decoding)?;
        let c = Accuracy::of(&preds, batch);
        correct += c.tokens_right;
        seqs += c.seqs;
        seqs_right += c.seqs_right;
    }
    if scored == 0 {
        return Err(ModelError::AllPad);
    }
    let loss = nll / scored as f64;
    Ok(Metrics {
        loss,
        ppl: loss.exp(),
        tok_acc: correct as f64 / scored as f64,
        seq_acc: seqs_right as f64 / seqs as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Evaluate every this many steps (and always after the last step).
    pub eval_every: u64,
    pub eval_batch_size: usize,
    /// Stop once validation sequence accuracy reaches this value.
    pub early_stop: Option<f64>,
    pub adam: AdamConfig,
    /// Seed of the per-step dropout streams.
    pub dropout_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            eval_every: 100,
            eval_batch_size: 64,
            early_stop: None,
            adam: AdamConfig::default(),
            dropout_seed: 0,
        }
    }
}

/// A model, its optimizer and the task it trains on.
///
/// Everything the loop consumes is a pure function of the seeds and the
/// step counter, so a trainer restored at step `k` continues exactly as an
/// uninterrupted one would.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub task: Task,
    pub config: TrainConfig,
    pub optim: Adam<T>,
    val: Vec<Batch>,
    started: Instant,
    /// Seconds accumulated by earlier sessions of a resumed run.
    pub secs_offset: f64,
    pub stopped_early: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, task: Task, config: TrainConfig) -> std::result::Result<Self, ModelError> {
        task.check_model(&model.config)?;
        if config.batch_size == 0 || config.eval_every == 0 {
            return Err(ModelError::Config("batch_size and eval_every must be positive".into()));
        }
        let val = task.val_batches(model.config.mode, config.eval_batch_size)?;
        let optim = Adam::new(config.adam, &model.store);
        Ok(Self {
            model,
            task,
            config,
            optim,
            val,
            started: Instant::now(),
            secs_offset: 0.0,
            stopped_early: false,
        })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn elapsed(&self) -> f64 {
        self.secs_offset + self.started.elapsed().as_secs_f64()
    }

    /// One optimizer step on the batch for the current step; returns the
    /// training loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step();
        let batch = self
            .task
            .train_batch(self.model.config.mode, step, self.config.batch_size)?;
        let rng = (self.model.config.dropout > 0.0)
            .then(|| stream_rng(self.config.dropout_seed, stream_id("dropout").wrapping_add(step)));
        self.model.store.zero_grads();
        let loss = self.model.loss_and_grad(&batch, rng)?;
        self.optim.update(&mut self.model.store)?;
        Ok(loss.to_f64_lossy())
    }

    /// Metrics on the validation split.
    pub fn evaluate(&self) -> Result<Metrics> {
        let decoding = self.task.decoding(self.model.config.mode);
        Ok(evaluate(&self.model, &self.val, decoding)?)
    }

    fn record(&self) -> Result<MetricRecord> {
        Ok(MetricRecord::new(self.step(), self.evaluate()?, self.elapsed()))
    }

    /// Trains until `config.steps` (or early stop), evaluating on schedule.
    ///
    /// A fresh trainer first logs the untrained model at step 0. Each record
    /// is passed to `sink` as soon as it exists.
    pub fn run<E>(
        &mut self,
        mut sink: impl FnMut(&Self, &MetricRecord) -> std::result::Result<(), E>,
    ) -> std::result::Result<MetricLog, E>
    where
        E: From<TrainError>,
    {
        let mut log = MetricLog::default();
        if self.step() == 0 {
            let r = self.record()?;
            let hit = self.reached_target(&r);
            sink(self, &r)?;
            log.records.push(r);
            if hit {
                return Ok(log);
            }
        }
        while self.step() < self.config.steps {
            self.train_step()?;
            let s = self.step();
            if s.is_multiple_of(self.config.eval_every) || s == self.config.steps {
                let r = self.record()?;
                let hit = self.reached_target(&r);
                sink(self, &r)?;
                log.records.push(r);
                if hit {
                    break;
                }
            }
        }
        Ok(log)
    }

    fn reached_target(&mut self, r: &MetricRecord) -> bool {
        let hit = self.config.early_stop.is_some_and(|t| r.seq_acc >= t);
        self.stopped_early |= hit;
        hit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelMode};
    use crate::task::{pad_batch, Split, TaskKind};
    use crate::SynthKind;

    fn tiny(kind: SynthKind, mode: ModelMode) -> (Model<f64>, Task) {
        let task = Task::new(TaskKind::Copy, 4, 3, 1).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: task.model_vocab(),
            max_len: 6,
            ..ModelConfig::new(mode, kind)
        };
        (Model::new(cfg, 3).unwrap(), task)
    }

    fn never(_: &Trainer<f64>, _: &MetricRecord) -> std::result::Result<(), TrainError> {
        Ok(())
    }

    #[test]
    fn zero_steps_logs_only_initial_eval() {
        let (model, task) = tiny(SynthKind::Dense, ModelMode::Decoder);
        let mut t = Trainer::new(model, task, TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        let log = t.run(never).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].step, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        let go = || {
            let (model, task) = tiny(SynthKind::Random { trainable: true }, ModelMode::Decoder);
            let cfg = TrainConfig {
                steps: 7,
                eval_every: 3,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, task, cfg).unwrap();
            let log = t.run(never).unwrap();
            log.records
                .iter()
                .map(|r| (r.step, r.loss.to_bits(), r.tok_acc.to_bits(), r.seq_acc.to_bits()))
                .collect::<Vec<_>>()
        };
        let a = go();
        assert_eq!(a.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 3, 6, 7]);
        assert_eq!(a, go());
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let (model, task) = tiny(SynthKind::Dense, ModelMode::Decoder);
        let val = task.val_batches(ModelMode::Decoder, 64).unwrap();
        let m = evaluate(&model, &val, Decoding::Greedy).unwrap();
        let ln_v = (task.model_vocab() as f64).ln();
        assert!((m.loss - ln_v).abs() < 0.1 * ln_v, "{} vs {ln_v}", m.loss);
        assert!((m.ppl - m.loss.exp()).abs() < 1e-9);
    }

    #[test]
    fn padding_does_not_change_metrics() {
        for mode in [ModelMode::Decoder, ModelMode::EncDec, ModelMode::Encoder] {
            let (model, task) = tiny(SynthKind::Dense, mode);
            let mut cfg = model.config.clone();
            cfg.max_len = 9;
            let model = Model::<f64>::new(cfg, 2).unwrap();
            let b = task.batch(mode, &task.generate(Split::Val, 0, 8)).unwrap();
            let padded = pad_batch(&b, 3).unwrap();
            let d = task.decoding(mode);
            let (x, y) = (evaluate(&model, &[b], d).unwrap(), evaluate(&model, &[padded], d).unwrap());
            assert_eq!(x.tok_acc, y.tok_acc, "{mode:?}");
            assert_eq!(x.seq_acc, y.seq_acc, "{mode:?}");
            assert!((x.loss - y.loss).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let (_, task) = tiny(SynthKind::Dense, ModelMode::Decoder);
        let b = task.batch(ModelMode::Decoder, &task.generate(Split::Val, 0, 5)).unwrap();
        let a = Accuracy::of(&b.targets, &b);
        assert_eq!((a.tokens, a.tokens_right, a.seqs, a.seqs_right), (15, 15, 5, 5));
        let mut wrong = b.targets.clone();
        wrong[5] += 1;
        let a = Accuracy::of(&wrong, &b);
        assert_eq!((a.tokens_right, a.seqs_right), (14, 4));
    }

    #[test]
    fn greedy_and_teacher_forcing_agree_on_first_scored_position() {
        let (model, task) = tiny(SynthKind::Dense, ModelMode::Decoder);
        let b = task.batch(ModelMode::Decoder, &task.generate(Split::Val, 0, 4)).unwrap();
        let tf = predictions(&model, &b, Decoding::TeacherForced).unwrap();
        let g = predictions(&model, &b, Decoding::Greedy).unwrap();
        let len = b.input.len;
        for r in 0..4 {
            assert_eq!(tf[r * len + 3], g[r * len + 3]);
        }
    }
}
