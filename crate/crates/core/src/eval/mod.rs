//! Downstream adaptation (finetuning, frozen attention probing, linear
//! probing), metrics and label-efficiency sweeps.

mod heads;
mod metrics;
mod report;

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use heads::{Head, HeadVariant, QueryAttentionHead};
pub use metrics::{auroc, average_ranks, macro_auroc, standardized_mae, TargetScores};
pub use report::{read_report, MetricReport, ReportSummary, LABELS_BLOB, METRICS_CSV, PREDICTIONS_BLOB, SUMMARY_JSON};

use crate::data::{subsample_training_set, WindowSet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::ops::{bce_with_logits, scalar, sigmoid};
use crate::nn::{Ctx, Init, ParamGroup, ParamStore};
use crate::seed::derive_seed;
use crate::train::{load_checkpoint, Adam};

const SALT_HEAD: u64 = 0x4845;
const SALT_SHUFFLE: u64 = 0x5348;
const SALT_DROPOUT: u64 = 0x4452;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultilabelClassification,
    Regression,
}

impl TaskKind {
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::MultilabelClassification => "auroc",
            TaskKind::Regression => "standardized_mae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Finetune,
    Frozen,
    Linear,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 3] = [AdaptMode::Finetune, AdaptMode::Frozen, AdaptMode::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::Finetune => "finetune",
            AdaptMode::Frozen => "frozen",
            AdaptMode::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adaptation mode `{s}` (finetune|frozen|linear)")))
    }
}

/// Labelled splits of one downstream task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_targets: usize,
    pub train: WindowSet,
    pub val: Option<WindowSet>,
    pub test: WindowSet,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, train: WindowSet, val: Option<WindowSet>, test: WindowSet) -> Result<Self> {
        let task = TaskSpec {
            kind,
            num_targets: train.num_targets,
            train,
            val,
            test,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let splits = [Some(("train", &self.train)), self.val.as_ref().map(|v| ("val", v)), Some(("test", &self.test))];
        for (name, set) in splits.into_iter().flatten() {
            let labels = set
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{name} split has no labels")))?;
            if set.num_targets != self.num_targets || self.num_targets == 0 {
                return Err(Error::Shape(format!(
                    "{name} split has {} targets, task declares {}",
                    set.num_targets, self.num_targets
                )));
            }
            if self.kind == TaskKind::MultilabelClassification {
                if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
                    return Err(Error::Data(format!("{name} split: classification label {bad} is not 0 or 1")));
                }
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Data("train and test splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Head learning rate (and the base rate for the other groups).
    pub learning_rate: f64,
    pub backbone_lr: f64,
    pub stem_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub attention_heads: usize,
    /// Head trained jointly with the encoder in finetune mode.
    pub finetune_head: HeadVariant,
    /// Default mode for front ends that do not name one.
    pub mode: AdaptMode,
    /// Default label-efficiency fractions.
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            learning_rate: 1e-3,
            backbone_lr: 1e-4,
            stem_lr: 1e-5,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            attention_heads: 16,
            finetune_head: HeadVariant::LinearMeanpool,
            mode: AdaptMode::Finetune,
            fractions: crate::data::power_of_two_fractions(4),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("learning_rate", self.learning_rate), ("backbone_lr", self.backbone_lr), ("stem_lr", self.stem_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_for(&self, mode: AdaptMode) -> HeadVariant {
        match mode {
            AdaptMode::Finetune => self.finetune_head,
            AdaptMode::Frozen => HeadVariant::QueryAttention,
            AdaptMode::Linear => HeadVariant::LinearFrozen,
        }
    }
}

/// Encoder plus trained head and the target standardization used in training.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub encoder: Encoder,
    pub head: Head,
    pub head_params: ParamStore,
    pub mode: AdaptMode,
    pub variant: HeadVariant,
    pub task: TaskKind,
    pub target_mean: Vec<f64>,
    /// Raw training standard deviation per target (0 for constant targets).
    pub target_std: Vec<f64>,
}

impl AdaptedModel {
    fn features(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let tokens = self.encoder.encode(x, ctx, false)?.tokens;
        Ok(if self.variant.needs_tokens() { tokens } else { tokens.mean(1)? })
    }

    fn scale(&self) -> Vec<f64> {
        self.target_std.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect()
    }

    fn standardized_targets(&self, y: &Tensor) -> Result<Tensor> {
        match self.task {
            TaskKind::MultilabelClassification => Ok(y.clone()),
            TaskKind::Regression => {
                let t = self.target_mean.len();
                let mean = Tensor::from_vec(self.target_mean.clone(), (1, t), &Device::Cpu)?.to_dtype(y.dtype())?;
                let sd = Tensor::from_vec(self.scale(), (1, t), &Device::Cpu)?.to_dtype(y.dtype())?;
                Ok(y.broadcast_sub(&mean)?.broadcast_div(&sd)?)
            }
        }
    }

    fn loss(&self, logits: &Tensor, y: &Tensor) -> Result<Tensor> {
        let target = self.standardized_targets(y)?;
        match self.task {
            TaskKind::MultilabelClassification => bce_with_logits(logits, &target),
            TaskKind::Regression => Ok((logits - target)?.abs()?.mean_all()?),
        }
    }

    fn outputs(&self, logits: &Tensor) -> Result<Array2<f32>> {
        let (b, t) = logits.dims2()?;
        let v = match self.task {
            TaskKind::MultilabelClassification => sigmoid(logits)?,
            TaskKind::Regression => {
                let mean = Tensor::from_vec(self.target_mean.clone(), (1, t), &Device::Cpu)?.to_dtype(logits.dtype())?;
                let sd = Tensor::from_vec(self.scale(), (1, t), &Device::Cpu)?.to_dtype(logits.dtype())?;
                logits.broadcast_mul(&sd)?.broadcast_add(&mean)?
            }
        };
        let flat = v.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Array2::from_shape_vec((b, t), flat).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Per-sample outputs on `set` with the encoder in evaluation mode:
    /// probabilities for classification, target units for regression.
    pub fn predict(&self, set: &WindowSet, batch_size: usize) -> Result<Array2<f32>> {
        let ctx = Ctx::eval();
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut rows = Vec::new();
        for chunk in idx.chunks(batch_size.max(1)) {
            let x = set.batch(chunk, self.encoder.dtype, &Device::Cpu)?;
            let logits = self.head.forward(&self.features(&x, &ctx)?)?;
            rows.push(self.outputs(&logits)?);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }
}

fn label_array(set: &WindowSet) -> Result<Array2<f32>> {
    let labels = set.labels.clone().ok_or_else(|| Error::Data("split has no labels".into()))?;
    Array2::from_shape_vec((set.len(), set.num_targets), labels).map_err(|e| Error::Shape(e.to_string()))
}

fn target_stats(task: &TaskSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = task.num_targets;
    match task.kind {
        TaskKind::MultilabelClassification => Ok((vec![0.0; t], vec![1.0; t])),
        TaskKind::Regression => {
            let y = label_array(&task.train)?.mapv(f64::from);
            let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty train split");
            let std = y.std_axis(ndarray::Axis(0), 0.0);
            Ok((mean.to_vec(), std.to_vec()))
        }
    }
}

/// Encodes a whole split once (frozen encoder, evaluation mode).
fn cached_features(model: &AdaptedModel, set: &WindowSet, batch_size: usize) -> Result<Tensor> {
    let ctx = Ctx::eval();
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch_size) {
        let x = set.batch(chunk, model.encoder.dtype, &Device::Cpu)?;
        parts.push(model.features(&x, &ctx)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains a head (and, for finetuning, the encoder with per-group learning
/// rates) on the task's training split and scores the test split. The
/// input encoder is never modified; the adapted model owns a copy.
pub fn adapt(encoder: &Encoder, task: &TaskSpec, mode: AdaptMode, cfg: &EvalConfig) -> Result<(AdaptedModel, MetricReport)> {
    cfg.validate()?;
    task.validate()?;
    for set in [&task.train, &task.test] {
        if set.channels != encoder.config.in_channels {
            return Err(Error::Shape(format!(
                "task windows have {} channels, encoder expects {}",
                set.channels, encoder.config.in_channels
            )));
        }
    }
    let variant = cfg.head_for(mode);
    let (target_mean, target_std) = target_stats(task)?;
    let mut head_params = ParamStore::new();
    let head = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SALT_HEAD]));
        let mut root = Init::new(&mut head_params, &mut rng, ParamGroup::Head, encoder.dtype);
        let mut init = root.sub("probe");
        Head::new(&mut init, variant, encoder.model_dim(), cfg.attention_heads, task.num_targets)?
    };
    let model = AdaptedModel {
        encoder: encoder.deep_clone()?,
        head,
        head_params,
        mode,
        variant,
        task: task.kind,
        target_mean,
        target_std,
    };

    let finetune = mode == AdaptMode::Finetune;
    let params: Vec<_> = if finetune {
        model.encoder.params.params.iter().chain(&model.head_params.params).cloned().collect()
    } else {
        model.head_params.params.clone()
    };
    let scales = params
        .iter()
        .map(|p| match p.group {
            ParamGroup::Stem => cfg.stem_lr / cfg.learning_rate,
            ParamGroup::Backbone => cfg.backbone_lr / cfg.learning_rate,
            ParamGroup::Head => 1.0,
        })
        .collect();
    let mut opt = Adam::with_scales(params, scales, cfg.learning_rate, cfg.weight_decay)?;

    let cache = if finetune { None } else { Some(cached_features(&model, &task.train, cfg.batch_size)?) };
    let labels = task.train.label_batch(&(0..task.train.len()).collect::<Vec<_>>(), model.encoder.dtype, &Device::Cpu)?;
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SALT_SHUFFLE, epoch as u64])));
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let feats = match &cache {
                Some(c) => c.index_select(&idx, 0)?,
                None => {
                    let x = task.train.batch(chunk, model.encoder.dtype, &Device::Cpu)?;
                    model.features(&x, &Ctx::train(derive_seed(cfg.seed, &[SALT_DROPOUT, step])))?
                }
            };
            let loss = model.loss(&model.head.forward(&feats)?, &labels.index_select(&idx, 0)?)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "{} adaptation: loss {value} at epoch {epoch}, step {step}",
                    mode.as_str()
                )));
            }
            opt.step(&loss.backward()?)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
            step += 1;
        }
        final_loss = total / count as f64;
        log::debug!("{} epoch {epoch}: train loss {final_loss:.5}", mode.as_str());
    }

    let predictions = model.predict(&task.test, cfg.batch_size)?;
    let labels = label_array(&task.test)?;
    let (p64, l64) = (predictions.mapv(f64::from), labels.mapv(f64::from));
    let scores = match task.kind {
        TaskKind::MultilabelClassification => macro_auroc(&p64, &l64)?,
        TaskKind::Regression => standardized_mae(&p64, &l64, &model.target_mean, &model.target_std)?,
    };
    let report = MetricReport {
        mode,
        head: variant,
        task: task.kind,
        scores,
        predictions,
        labels,
        num_train: task.train.len(),
        final_train_loss: final_loss,
    };
    Ok((model, report))
}

/// [`adapt`] on the student encoder stored in a checkpoint directory.
pub fn adapt_checkpoint(checkpoint: &Path, task: &TaskSpec, mode: AdaptMode, cfg: &EvalConfig) -> Result<(AdaptedModel, MetricReport)> {
    let trainer = load_checkpoint(checkpoint)?;
    adapt(&trainer.objective.student, task, mode, cfg)
}

#[derive(Debug, Clone)]
pub struct LabelEfficiencyRow {
    pub fraction: f64,
    pub num_train: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct LabelEfficiency {
    pub rows: Vec<LabelEfficiencyRow>,
}

impl LabelEfficiency {
    /// `fraction,num_train,macro,error` with one row per fraction.
    pub fn csv(&self) -> String {
        let mut s = String::from("fraction,num_train,macro,error\n");
        for r in &self.rows {
            let m = r.report.scores.macro_score.map_or(String::new(), |m| format!("{m:?}"));
            let _ = writeln!(s, "{:?},{},{m},{:?}", r.fraction, r.num_train, r.report.residual_error());
        }
        s
    }

    /// `(num_train, residual error)` pairs for power-law fitting.
    pub fn error_series(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.num_train as f64, r.report.residual_error())).collect()
    }
}

/// One [`adapt`] per fraction on nested training subsets drawn with `seed`.
pub fn label_efficiency(
    encoder: &Encoder,
    task: &TaskSpec,
    fractions: &[f64],
    mode: AdaptMode,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<LabelEfficiency> {
    if fractions.is_empty() {
        return Err(Error::Config("no fractions requested".into()));
    }
    let subsets = subsample_training_set(task.train.len(), fractions, seed)?;
    let mut rows = Vec::with_capacity(subsets.len());
    for s in subsets {
        let sub = TaskSpec {
            train: task.train.subset(&s.indices),
            ..task.clone()
        };
        let (_, report) = adapt(encoder, &sub, mode, cfg)?;
        log::info!(
            "label efficiency f={}: n={} {}={:?}",
            s.fraction,
            s.indices.len(),
            report.metric_name(),
            report.scores.macro_score
        );
        rows.push(LabelEfficiencyRow {
            fraction: s.fraction,
            num_train: s.indices.len(),
            report,
        });
    }
    Ok(LabelEfficiency { rows })
}
