//! Self-supervised objectives and their shared machinery: EMA teachers,
//! span and multi-block masking, online codebooks, Sinkhorn-Knopp balanced
//! assignment and prototype banks.
//!
//! An [`Objective`] owns the student encoder, its SSL heads and any
//! non-gradient state. [`Objective::forward`] is pure (it takes `&self`) and
//! returns the loss together with a [`PendingUpdate`]; the trainer applies
//! that update with [`Objective::apply_update`] after the optimizer step.
//! Validation simply drops the update.

mod codebook;
mod config;
mod cpc;
mod data2vec;
mod dinosr;
mod ema;
mod hubertpp;
mod jepa;
mod masking;
mod prototypes;
mod sinkhorn;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use codebook::Codebook;
pub use config::{
    CpcConfig, Data2vecConfig, DinosrConfig, HubertppConfig, JepaConfig, ObjectiveConfig, ObjectiveKind,
};
pub use cpc::{cpc_loss, CpcHead};
pub use data2vec::{data2vec_loss, data2vec_targets, Data2vecHead};
pub use dinosr::{dinosr_loss, DinosrHead};
pub use ema::{ema_update, EmaConfig};
pub use hubertpp::{hubertpp_loss, HubertppHead};
pub use jepa::{jepa_loss, jepa_targets, JepaHead};
pub use masking::{sample_multiblock_mask, sample_span_mask, Block, BlockMaskSpec, MultiBlockMask, SpanMaskSpec};
pub use prototypes::PrototypeBank;
pub use sinkhorn::{mean_row_entropy, sinkhorn_knopp};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ops::mask_tensor;
use crate::nn::{Ctx, Init, Param, ParamGroup, ParamStore};
use crate::seed::derive_seed;

/// Non-gradient state changes produced by one forward pass.
#[derive(Debug, Default)]
pub struct PendingUpdate {
    /// Per codebook: teacher features `[n, dim]` and their assignments.
    pub codebooks: Vec<(Tensor, Vec<u32>)>,
    /// Per prototype bank: teacher features and Sinkhorn assignments.
    pub prototypes: Vec<(Array2<f64>, Array2<f64>)>,
    pub jepa_shrinks: u64,
}

#[derive(Debug)]
pub struct StepOutput {
    pub loss: Tensor,
    pub update: PendingUpdate,
    /// Token positions that contributed to the loss.
    pub positions: usize,
}

#[derive(Debug, Clone)]
pub enum Heads {
    Data2vec(Data2vecHead),
    Dinosr(DinosrHead),
    Jepa(JepaHead),
    Cpc(CpcHead),
    Hubertpp(HubertppHead),
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub config: ObjectiveConfig,
    pub student: Encoder,
    /// Trainable SSL head parameters (group `Head`).
    pub head_params: ParamStore,
    pub heads: Heads,
    pub teacher: Option<Encoder>,
    /// EMA mirrors of selected head parameters, paired with `mirrored`.
    pub teacher_head_params: ParamStore,
    pub step_count: u64,
    pub counters: BTreeMap<String, u64>,
}

/// Per-sample span masks for a `[b, t]` token grid, flattened row-major.
pub fn span_masks(b: usize, t: usize, spec: &SpanMaskSpec, seed: u64) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(b * t);
    for i in 0..b {
        out.extend(sample_span_mask(t, spec, derive_seed(seed, &[i as u64]))?);
    }
    Ok(out)
}

/// Replaces tokens where `mask` is set with the learned embedding `emb: [dim]`.
pub fn replace_masked(tokens: &Tensor, mask: &[bool], emb: &Var) -> Result<Tensor> {
    let (b, t, _) = tokens.dims3()?;
    let m = mask_tensor(mask, &[b, t, 1], tokens.dtype())?;
    let keep = (1.0 - &m)?;
    Ok((tokens.broadcast_mul(&keep)? + m.broadcast_mul(emb.as_tensor())?)?)
}

fn head_init<'a>(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, dtype: DType) -> Init<'a> {
    Init::new(store, rng, ParamGroup::Head, dtype)
}

impl Objective {
    /// Builds the student from `(encoder, seed)`; the teacher, when used, is
    /// an exact copy. Heads and non-gradient state use derived seeds.
    pub fn new(config: &ObjectiveConfig, encoder: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate(encoder)?;
        let student = Encoder::new(encoder, seed, dtype)?;
        let mut head_params = ParamStore::new();
        let mut teacher_head_params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let state_seed = derive_seed(seed, &[2]);
        let heads = {
            let mut init = head_init(&mut head_params, &mut rng, dtype);
            match config {
                ObjectiveConfig::Data2vec(_) => Heads::Data2vec(Data2vecHead::new(&mut init, encoder)?),
                ObjectiveConfig::Dinosr(c) => Heads::Dinosr(DinosrHead::new(&mut init, encoder, c, state_seed)?),
                ObjectiveConfig::Jepa(_) => Heads::Jepa(JepaHead::new(&mut init, encoder)?),
                ObjectiveConfig::Cpc(c) => Heads::Cpc(CpcHead::new(&mut init, encoder, c)?),
                ObjectiveConfig::Hubertpp(c) => {
                    let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
                    let mut tinit = head_init(&mut teacher_head_params, &mut trng, dtype);
                    Heads::Hubertpp(HubertppHead::new(&mut init, &mut tinit, encoder, c, state_seed)?)
                }
            }
        };
        let teacher = match config.ema() {
            Some(_) => {
                let t = Encoder::new(encoder, seed, dtype)?;
                t.params.copy_from(&student.params)?;
                Some(t)
            }
            None => None,
        };
        let obj = Objective {
            config: config.clone(),
            student,
            head_params,
            heads,
            teacher,
            teacher_head_params,
            step_count: 0,
            counters: BTreeMap::new(),
        };
        obj.sync_teacher_heads()?;
        Ok(obj)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.config.kind()
    }

    /// Student encoder plus SSL head parameters: everything the optimizer owns.
    pub fn trainable_params(&self) -> Vec<Param> {
        self.student
            .params
            .params
            .iter()
            .chain(&self.head_params.params)
            .cloned()
            .collect()
    }

    fn mirrored_head_vars(&self) -> Vec<Var> {
        match &self.heads {
            Heads::Hubertpp(h) => h.student_projector_vars(),
            _ => Vec::new(),
        }
    }

    fn teacher_head_vars(&self) -> Vec<Var> {
        self.teacher_head_params.params.iter().map(|p| p.var.clone()).collect()
    }

    fn sync_teacher_heads(&self) -> Result<()> {
        ema_update(&self.teacher_head_vars(), &self.mirrored_head_vars(), 0.0)
    }

    fn teacher(&self) -> Result<&Encoder> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no teacher", self.kind().as_str())))
    }

    /// Loss on a `[b, c, t]` batch. `mask_seed` fixes all masking.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx, mask_seed: u64) -> Result<StepOutput> {
        match (&self.heads, &self.config) {
            (Heads::Data2vec(h), ObjectiveConfig::Data2vec(c)) => h.forward(c, &self.student, self.teacher()?, x, ctx, mask_seed),
            (Heads::Dinosr(h), ObjectiveConfig::Dinosr(c)) => h.forward(c, &self.student, self.teacher()?, x, ctx, mask_seed),
            (Heads::Jepa(h), ObjectiveConfig::Jepa(c)) => h.forward(c, &self.student, self.teacher()?, x, ctx, mask_seed),
            (Heads::Cpc(h), ObjectiveConfig::Cpc(c)) => h.forward(c, &self.student, x, ctx),
            (Heads::Hubertpp(h), ObjectiveConfig::Hubertpp(c)) => h.forward(c, &self.student, self.teacher()?, x, ctx, mask_seed),
            _ => Err(Error::Config("objective heads do not match configuration".into())),
        }
    }

    /// Applies EMA teacher, codebook and prototype updates, then advances
    /// the step counter.
    pub fn apply_update(&mut self, update: PendingUpdate) -> Result<()> {
        if let (Some(teacher), Some(ema)) = (&self.teacher, self.config.ema()) {
            let m = ema.momentum_at(self.step_count);
            let t: Vec<Var> = teacher.params.params.iter().map(|p| p.var.clone()).collect();
            let s: Vec<Var> = self.student.params.params.iter().map(|p| p.var.clone()).collect();
            ema_update(&t, &s, m)?;
            ema_update(&self.teacher_head_vars(), &self.mirrored_head_vars(), m)?;
        }
        match &self.heads {
            Heads::Dinosr(h) => {
                for (cb, (features, labels)) in h.codebooks.iter().zip(&update.codebooks) {
                    cb.update(features, labels)?;
                }
            }
            Heads::Hubertpp(h) => {
                for (bank, (features, assign)) in h.banks.iter().zip(&update.prototypes) {
                    bank.update(features, assign, self.step_count)?;
                }
            }
            _ => {}
        }
        if update.jepa_shrinks > 0 {
            *self.counters.entry("jepa_shrinks".into()).or_insert(0) += update.jepa_shrinks;
        }
        self.step_count += 1;
        Ok(())
    }

    /// Every tensor needed to resume, with stable names.
    pub fn state_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        let mut add_store = |prefix: &str, store: &ParamStore| {
            for p in &store.params {
                out.push((format!("{prefix}.{}", p.name), p.var.clone()));
            }
            for b in &store.buffers {
                out.push((format!("{prefix}_buffer.{}", b.name), b.var.clone()));
            }
        };
        add_store("student", &self.student.params);
        add_store("head", &self.head_params);
        if let Some(t) = &self.teacher {
            add_store("teacher", &t.params);
        }
        add_store("teacher_head", &self.teacher_head_params);
        match &self.heads {
            Heads::Dinosr(h) => {
                for (i, cb) in h.codebooks.iter().enumerate() {
                    out.push((format!("codebook.{i}.entries"), cb.entries.clone()));
                    out.push((format!("codebook.{i}.usage_counts"), cb.usage_counts.clone()));
                }
            }
            Heads::Hubertpp(h) => {
                for (i, bank) in h.banks.iter().enumerate() {
                    out.push((format!("prototypes.{i}"), bank.prototypes.clone()));
                }
            }
            _ => {}
        }
        out
    }

    pub fn codebooks(&self) -> &[Codebook] {
        match &self.heads {
            Heads::Dinosr(h) => &h.codebooks,
            _ => &[],
        }
    }

    pub fn prototype_banks(&self) -> &[PrototypeBank] {
        match &self.heads {
            Heads::Hubertpp(h) => &h.banks,
            _ => &[],
        }
    }
}

#[cfg(test)]
mod tests;
