//! Pretraining loop, Adam, checkpoints and continual pretraining.

mod adam;
mod checkpoint;
mod record;

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{
    load_checkpoint, load_checkpoint_into, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_VERSION, MANIFEST_FILE,
};
pub use record::{RunRecord, CONFIG_ECHO, RUN_INFO, STEP_CSV, VAL_CSV};

use crate::data::WindowSet;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::ops::scalar;
use crate::nn::Ctx;
use crate::objectives::{mean_row_entropy, Objective, ObjectiveConfig, ObjectiveKind, PendingUpdate};
use crate::seed::derive_seed;

// Sub-stream tags for seed derivation.
const SALT_SHUFFLE: u64 = 0x5348;
const SALT_DROPOUT: u64 = 0x4452;
const SALT_MASK: u64 = 0x4d41;
const SALT_VAL: u64 = 0x5641;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps (smoke runs).
    pub max_steps: Option<u64>,
    /// Keep a checkpoint per epoch under `checkpoints/epoch_NNN` in addition
    /// to the rolling `checkpoint/`.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-3,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            grad_clip: None,
            max_steps: None,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Summary of the batch that produced a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub non_finite: usize,
}

impl BatchStats {
    pub fn of(x: &Tensor) -> Result<Self> {
        let v = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let finite: Vec<f64> = v.iter().copied().filter(|a| a.is_finite()).collect();
        let n = finite.len().max(1) as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Ok(BatchStats {
            mean,
            std: var.sqrt(),
            min: finite.iter().copied().fold(f64::INFINITY, f64::min),
            max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            non_finite: v.len() - finite.len(),
        })
    }
}

/// Objective plus optimizer state and run bookkeeping.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub objective: Objective,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub epochs_completed: u64,
    pub provenance: Vec<String>,
}

impl Trainer {
    /// Fresh objective seeded with `config.seed`, 32-bit precision.
    pub fn new(objective: &ObjectiveConfig, encoder: &EncoderConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let objective = Objective::new(objective, encoder, config.seed, DType::F32)?;
        Self::from_objective(objective, config)
    }

    pub fn from_objective(objective: Objective, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = Adam::new(objective.trainable_params(), config.learning_rate, config.weight_decay)?;
        optimizer.grad_clip = config.grad_clip;
        Ok(Trainer {
            objective,
            optimizer,
            config: config.clone(),
            epochs_completed: 0,
            provenance: Vec::new(),
        })
    }

    pub fn global_step(&self) -> u64 {
        self.objective.step_count
    }

    /// One optimizer step on a `[b, c, t]` batch; returns the loss before the
    /// update.
    pub fn train_step(&mut self, x: &Tensor) -> Result<f64> {
        let step = self.objective.step_count;
        let seed = self.config.seed;
        let ctx = Ctx::train(derive_seed(seed, &[SALT_DROPOUT, step]));
        let out = self.objective.forward(x, &ctx, derive_seed(seed, &[SALT_MASK, step]))?;
        let loss = scalar(&out.loss)?;
        if !loss.is_finite() {
            return Err(self.diagnose(x, loss, &out.update));
        }
        let grads = out.loss.backward()?;
        self.optimizer.step(&grads)?;
        self.objective.apply_update(out.update)?;
        Ok(loss)
    }

    fn diagnose(&self, x: &Tensor, loss: f64, update: &PendingUpdate) -> Error {
        let mut msg = format!("loss {loss} at step {}", self.objective.step_count);
        match BatchStats::of(x) {
            Ok(s) => msg.push_str(&format!(
                "; batch mean {:.4e} std {:.4e} min {:.4e} max {:.4e} non-finite {}",
                s.mean, s.std, s.min, s.max, s.non_finite
            )),
            Err(e) => msg.push_str(&format!("; batch stats unavailable ({e})")),
        }
        for (i, cb) in self.objective.codebooks().iter().enumerate() {
            if let Ok(h) = usage_entropy(&cb.usage_counts) {
                msg.push_str(&format!("; codebook {i} usage entropy {h:.4}"));
            }
        }
        for (i, (_, assign)) in update.prototypes.iter().enumerate() {
            msg.push_str(&format!("; prototype bank {i} assignment entropy {:.4}", mean_row_entropy(assign)));
        }
        log::error!("{msg}");
        Error::Numerical(msg)
    }

    /// Mean loss over `set` in target mode with fixed masking seeds. Does not
    /// touch parameters, buffers or objective state.
    pub fn validate(&self, set: &WindowSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let idx: Vec<usize> = (0..set.len()).collect();
        let ctx = Ctx::target();
        let (mut total, mut count) = (0.0, 0usize);
        for (b, chunk) in idx.chunks(self.config.batch_size).enumerate() {
            let x = set.batch(chunk, DType::F32, &Device::Cpu)?;
            let out = self.objective.forward(&x, &ctx, derive_seed(self.config.seed, &[SALT_VAL, b as u64]))?;
            total += scalar(&out.loss)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count as f64)
    }

    /// Shuffled window order for an epoch.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[SALT_SHUFFLE, epoch])));
        idx
    }

    fn check_data(&self, set: &WindowSet) -> Result<()> {
        let want = self.objective.student.config.in_channels;
        if set.channels != want {
            return Err(Error::Config(format!(
                "encoder expects {want} channels, data has {}",
                set.channels
            )));
        }
        if set.is_empty() {
            return Err(Error::Data("no training windows".into()));
        }
        Ok(())
    }

    /// Runs `config.epochs` epochs, validating and checkpointing after each.
    fn run_epochs(&mut self, train: &WindowSet, val: Option<&WindowSet>, out_dir: Option<&Path>, record: &mut RunRecord) -> Result<()> {
        self.check_data(train)?;
        if let Some(v) = val {
            self.check_data(v)?;
        }
        let mut steps_taken = 0u64;
        for _ in 0..self.config.epochs {
            if self.config.max_steps.is_some_and(|m| steps_taken >= m) {
                break;
            }
            let epoch = self.epochs_completed;
            let order = self.epoch_order(train.len(), epoch);
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps.is_some_and(|m| steps_taken >= m) {
                    break;
                }
                let x = train.batch(chunk, DType::F32, &Device::Cpu)?;
                let step = self.global_step();
                let loss = self.train_step(&x).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {epoch})")),
                    other => other,
                })?;
                record.step_losses.push((step, loss));
                steps_taken += 1;
            }
            self.epochs_completed += 1;
            if let Some(v) = val {
                let vl = self.validate(v)?;
                log::info!("epoch {epoch}: val loss {vl:.5}");
                record.val_losses.push((epoch, vl));
            }
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("checkpoint"), self)?;
                if self.config.keep_epoch_checkpoints {
                    save_checkpoint(&dir.join("checkpoints").join(format!("epoch_{epoch:03}")), self)?;
                }
            }
        }
        Ok(())
    }

    fn config_echo(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Echo<'a> {
            train: &'a TrainConfig,
            encoder: &'a EncoderConfig,
            objective: &'a ObjectiveConfig,
        }
        toml::to_string(&Echo {
            train: &self.config,
            encoder: &self.objective.student.config,
            objective: &self.objective.config,
        })
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn usage_entropy(counts: &candle_core::Var) -> Result<f64> {
    let c = counts.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let total: f64 = c.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(-c.iter().filter(|&&v| v > 0.0).map(|v| v / total * (v / total).ln()).sum::<f64>())
}

fn finish(trainer: Trainer, mut record: RunRecord, started: Instant, out_dir: Option<&Path>) -> Result<(Trainer, RunRecord)> {
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        // the final state is always on disk, also for zero-epoch runs
        save_checkpoint(&dir.join("checkpoint"), &trainer)?;
        record.write(dir)?;
    }
    Ok((trainer, record))
}

/// Pretrains a fresh encoder with `objective` on `train`. Compatibility
/// between objective and backbone is checked before any step. With
/// `out_dir`, a checkpoint and the run record are written there.
pub fn pretrain(
    train: &WindowSet,
    val: Option<&WindowSet>,
    objective: &ObjectiveConfig,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Trainer, RunRecord)> {
    let started = Instant::now();
    let mut trainer = Trainer::new(objective, encoder, config)?;
    trainer.provenance.push(format!(
        "pretrain:{} windows={} epochs={} seed={}",
        objective.kind().as_str(),
        train.len(),
        config.epochs,
        config.seed
    ));
    let mut record = RunRecord {
        config_echo: trainer.config_echo()?,
        dataset_size: train.len(),
        val_size: val.map_or(0, WindowSet::len),
        ..Default::default()
    };
    trainer.run_epochs(train, val, out_dir, &mut record)?;
    finish(trainer, record, started, out_dir)
}

/// Continues SSL on target-domain windows from a checkpoint with a fresh
/// optimizer. `expected_kind`, when given, must match the checkpoint.
pub fn continual_pretrain(
    checkpoint: &Path,
    expected_kind: Option<ObjectiveKind>,
    train: &WindowSet,
    val: Option<&WindowSet>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Trainer, RunRecord)> {
    let started = Instant::now();
    let loaded = load_checkpoint(checkpoint)?;
    if let Some(kind) = expected_kind {
        if kind != loaded.objective.kind() {
            return Err(Error::Config(format!(
                "objective kind mismatch: checkpoint is {}, configuration asks for {}",
                loaded.objective.kind().as_str(),
                kind.as_str()
            )));
        }
    }
    let (epochs_done, mut provenance) = (loaded.epochs_completed, loaded.provenance);
    let mut trainer = Trainer::from_objective(loaded.objective, config)?;
    trainer.epochs_completed = epochs_done;
    provenance.push(format!(
        "continual:{} windows={} epochs={} seed={} from={}",
        trainer.objective.kind().as_str(),
        train.len(),
        config.epochs,
        config.seed,
        checkpoint.display()
    ));
    trainer.provenance = provenance;
    let mut record = RunRecord {
        config_echo: trainer.config_echo()?,
        dataset_size: train.len(),
        val_size: val.map_or(0, WindowSet::len),
        ..Default::default()
    };
    trainer.run_epochs(train, val, out_dir, &mut record)?;
    finish(trainer, record, started, out_dir)
}

#[cfg(test)]
mod tests;
