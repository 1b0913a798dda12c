//! Mini-batch Adam training with validation-based early stopping.

use std::path::Path;

use hisgt_nn::rng::hash_words;
use hisgt_nn::{AdamConfig, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::PatientRecord;
use crate::hashing::write_bytes;
use crate::model::{Batch, FrozenTables, HiSGTModel, LossBreakdown, TrainStep};
use crate::tokenizer::{encode, EncodeOptions, TokenSequence, Vocabulary};
use crate::{Error, Result};

const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Validation quantity used to pick the best epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Total,
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub select_on: Selection,
    /// Stop once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    /// Anneal the learning rate linearly to zero over `epochs`.
    pub lr_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 48,
            lr: 1e-4,
            patience: 10,
            seed: 0,
            select_on: Selection::Total,
            max_steps: None,
            lr_decay: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Running mean over the epoch's batches, dropout on.
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub improved: bool,
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

pub fn encode_corpus(records: &[PatientRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    records
        .iter()
        .map(|r| encode(r, vocab, max_len, EncodeOptions::default()))
        .collect()
}

/// Visiting order of the training set in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(hash_words(&[
        seed,
        epoch as u64,
        SHUFFLE_TAG,
    ])));
    order
}

fn batches<'a>(seqs: &'a [TokenSequence], order: &[usize], size: usize) -> Result<Vec<(Vec<usize>, Batch)>> {
    order
        .chunks(size.max(1))
        .map(|idx| {
            let refs: Vec<&'a TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
            Ok((idx.to_vec(), Batch::new(&refs)?))
        })
        .collect()
}

/// Loss over `seqs` without dropout or updates.
pub fn evaluate(model: &HiSGTModel<f32>, seqs: &[TokenSequence], batch_size: usize) -> Result<LossBreakdown> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    let order: Vec<usize> = (0..seqs.len()).collect();
    let parts = batches(seqs, &order, batch_size)?
        .par_iter()
        .map(|(_, b)| model.loss(&mut Graph::new(false), b, None).map(|(_, bd)| bd))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::combine(
        &parts,
        model.config.lambda_h,
        model.config.lambda_s,
    ))
}

/// Epoch-by-epoch training that can be checkpointed and resumed between
/// epochs. Shuffles and dropout masks are keyed by `(seed, epoch)` and
/// `(seed, step)`, so a resumed run matches an uninterrupted one bitwise.
pub struct TrainSession {
    pub model: HiSGTModel<f32>,
    pub state: TrainState,
    best: Option<HiSGTModel<f32>>,
}

impl TrainSession {
    pub fn new(model: HiSGTModel<f32>, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            model,
            state: TrainState {
                config,
                ..TrainState::default()
            },
            best: None,
        })
    }

    /// Continue from the latest and best checkpoints of an earlier run.
    pub fn resume(
        last: Checkpoint,
        best: Option<Checkpoint>,
        vocab: &Vocabulary,
        tables: &FrozenTables,
    ) -> Result<Self> {
        let state = last.header.train_state.clone();
        let model = last.into_model(vocab, tables)?;
        let best = best.map(|b| b.into_model(vocab, tables)).transpose()?;
        if state.best_epoch.is_some() != best.is_some() {
            return Err(Error::Checkpoint("best checkpoint missing or unexpected".into()));
        }
        Ok(Self { model, state, best })
    }

    pub fn finished(&self) -> bool {
        let s = &self.state;
        s.epochs_done >= s.config.epochs
            || (s.epochs_done > 0 && s.epochs_since_improvement >= s.config.patience)
            || s.config.max_steps.is_some_and(|m| self.model.params.step() >= m)
    }

    pub fn run_epoch(&mut self, train: &[TokenSequence], val: &[TokenSequence]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyInput(
                "training and validation sets must be non-empty".into(),
            ));
        }
        let cfg = self.state.config.clone();
        let epoch = self.state.epochs_done;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let all = batches(train, &order, cfg.batch_size)?;
        let per_epoch = all.len();
        let mut parts = Vec::new();
        for (b, (ids, batch)) in all.into_iter().enumerate() {
            if cfg.max_steps.is_some_and(|m| self.model.params.step() >= m) {
                break;
            }
            let step = TrainStep {
                seed: cfg.seed,
                step: self.model.params.step(),
            };
            let mut g = Graph::new(true);
            let (loss, bd) = self.model.loss(&mut g, &batch, Some(step))?;
            if !bd.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!("epoch {epoch}, batch records {ids:?}")));
            }
            let grads = g.backward(loss)?;
            self.model.params.zero_grad();
            self.model.params.accumulate(&grads)?;
            if !self.model.params.grads_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "gradient at epoch {epoch}, batch records {ids:?}"
                )));
            }
            let lr = if cfg.lr_decay {
                let done = (epoch * per_epoch + b) as f64 / (cfg.epochs.max(1) * per_epoch) as f64;
                cfg.lr * (1.0 - done).max(0.0)
            } else {
                cfg.lr
            };
            self.model.params.adam_step(&AdamConfig::with_lr(lr));
            parts.push(bd);
        }
        let c = &self.model.config;
        let train_bd = LossBreakdown::combine(&parts, c.lambda_h, c.lambda_s);
        let val_bd = evaluate(&self.model, val, cfg.batch_size)?;
        let metric = match cfg.select_on {
            Selection::Total => val_bd.total,
            Selection::Ce => val_bd.ce,
        };
        if !metric.is_finite() {
            return Err(Error::NonFiniteLoss(format!("validation at epoch {epoch}")));
        }
        let improved = self.state.best_val.is_none_or(|b| metric < b);
        if improved {
            self.state.best_val = Some(metric);
            self.state.best_epoch = Some(epoch);
            self.state.epochs_since_improvement = 0;
            self.best = Some(self.model.clone());
        } else {
            self.state.epochs_since_improvement += 1;
        }
        self.state.epochs_done += 1;
        let rec = EpochRecord {
            epoch,
            step: self.model.params.step(),
            train: train_bd,
            val: val_bd,
            improved,
        };
        self.state.history.push(rec);
        Ok(rec)
    }

    pub fn run(&mut self, train: &[TokenSequence], val: &[TokenSequence]) -> Result<()> {
        while !self.finished() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    pub fn last_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.state.clone())
    }

    /// Parameters of the minimum-validation epoch.
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let best = self
            .best
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no epoch has finished".into()))?;
        Ok(Checkpoint::from_model(best, self.state.clone()))
    }

    pub fn best_model(&self) -> Option<&HiSGTModel<f32>> {
        self.best.as_ref()
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub fn train(
    model: HiSGTModel<f32>,
    train: &[TokenSequence],
    val: &[TokenSequence],
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut s = TrainSession::new(model, config)?;
    s.run(train, val)?;
    Ok(TrainOutcome {
        best: s.best_checkpoint()?,
        last: s.last_checkpoint(),
        history: s.state.history,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "step",
        "train_total",
        "train_ce",
        "train_mse_h",
        "train_mse_s",
        "val_total",
        "val_ce",
        "val_mse_h",
        "val_mse_s",
        "improved",
    ])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.train.total.to_string(),
            r.train.ce.to_string(),
            r.train.mse_hier.to_string(),
            r.train.mse_sem.to_string(),
            r.val.total.to_string(),
            r.val.ce.to_string(),
            r.val.mse_hier.to_string(),
            r.val.mse_sem.to_string(),
            r.improved.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_bytes(path, history_csv(history)?.as_bytes())
}
