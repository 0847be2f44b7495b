use candle_core::{Device, Tensor};

use super::config::CpcConfig;
use super::{PendingUpdate, StepOutput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ops::log_softmax_last;
use crate::nn::{Ctx, Init, Linear};

/// One bias-free linear projection per prediction horizon.
#[derive(Debug, Clone)]
pub struct CpcHead {
    pub projections: Vec<Linear>,
}

/// InfoNCE over within-sequence candidates. `predictions: [b, K, t, d]`
/// holds `W_k c_t` for horizons `k = 1..=K`; `latents: [b, t, d]`. For each
/// anchor `t` and horizon `k` with `t + k < T`, the positive is
/// `latents[t + k]` and every latent of the same sequence is a candidate.
/// Returns the mean cross-entropy over valid (anchor, horizon) pairs and
/// their count per sequence.
pub fn cpc_loss(predictions: &Tensor, latents: &Tensor) -> Result<(Tensor, usize)> {
    let (b, k_steps, t, d) = predictions.dims4()?;
    if t < k_steps + 1 {
        return Err(Error::Shape(format!(
            "cpc needs at least {} tokens, got {t}",
            k_steps + 1
        )));
    }
    let scores = predictions
        .reshape((b, k_steps * t, d))?
        .matmul(&latents.transpose(1, 2)?.contiguous()?)?;
    let logp = log_softmax_last(&scores)?;
    let mut select = vec![0f32; k_steps * t * t];
    let mut valid = 0usize;
    for k in 1..=k_steps {
        for anchor in 0..t - k {
            select[((k - 1) * t + anchor) * t + anchor + k] = 1.0;
            valid += 1;
        }
    }
    let select = Tensor::from_vec(select, (1, k_steps * t, t), &Device::Cpu)?.to_dtype(logp.dtype())?;
    let total = logp.broadcast_mul(&select)?.sum_all()?;
    Ok(((total.neg()? / (valid * b) as f64)?, valid))
}

impl CpcHead {
    pub fn new(init: &mut Init, encoder: &EncoderConfig, cfg: &CpcConfig) -> Result<Self> {
        let d = encoder.backbone.model_dim;
        let bound = cfg.projection_init_scale / (d as f64).sqrt();
        let projections = (0..cfg.num_steps)
            .map(|k| Linear::with_bound(&mut init.sub(&format!("proj.{k}")), d, d, false, bound))
            .collect::<Result<_>>()?;
        Ok(CpcHead { projections })
    }

    pub fn forward(&self, _cfg: &CpcConfig, student: &Encoder, x: &Tensor, ctx: &Ctx) -> Result<StepOutput> {
        let latents = student.stem_forward(x, ctx, None)?;
        let context = student.backbone_forward(&latents, ctx, None)?;
        let preds = self
            .projections
            .iter()
            .map(|p| p.forward(&context))
            .collect::<Result<Vec<_>>>()?;
        let preds = Tensor::stack(&preds, 1)?;
        let (loss, valid) = cpc_loss(&preds, &latents)?;
        Ok(StepOutput {
            loss,
            update: PendingUpdate::default(),
            positions: valid * x.dim(0)?,
        })
    }

    /// Candidates per anchor for an input producing `tokens` latents.
    pub fn num_candidates(tokens: usize) -> usize {
        tokens
    }
}

