use candle_core::{Tensor, Var, D};

use super::config::JepaConfig;
use super::masking::sample_multiblock_mask;
use super::{PendingUpdate, StepOutput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ops::{layer_norm, mask_tensor, masked_mean, smooth_l1};
use crate::nn::{Ctx, Init, SsmBlock};
use crate::seed::derive_seed;

/// Learned mask token and a single non-causal SSM predictor.
#[derive(Debug, Clone)]
pub struct JepaHead {
    pub mask_token: Var,
    pub predictor: SsmBlock,
}

/// Teacher targets: layer norm applied to the top layer, then again to the
/// aggregate (a single layer here).
pub fn jepa_targets(top_layer: &Tensor) -> Result<Tensor> {
    layer_norm(&layer_norm(&top_layer.detach(), 1e-5)?, 1e-5)
}

/// Smooth-L1 averaged over feature dims and prediction positions
/// (`pred_mask: [b, t]`).
pub fn jepa_loss(pred: &Tensor, target: &Tensor, pred_mask: &Tensor, beta: f64) -> Result<Tensor> {
    let per_pos = smooth_l1(pred, target, beta)?.mean(D::Minus1)?;
    masked_mean(&per_pos, pred_mask)
}

impl JepaHead {
    pub fn new(init: &mut Init, encoder: &EncoderConfig) -> Result<Self> {
        let b = &encoder.backbone;
        Ok(JepaHead {
            mask_token: init.normal("mask_token", &[b.model_dim], 0.1, false)?,
            predictor: SsmBlock::new(&mut init.sub("predictor"), b.model_dim, b.state_dim, b.dropout, false)?,
        })
    }

    pub fn forward(
        &self,
        cfg: &JepaConfig,
        student: &Encoder,
        teacher: &Encoder,
        x: &Tensor,
        ctx: &Ctx,
        seed: u64,
    ) -> Result<StepOutput> {
        let tokens = student.stem_forward(x, ctx, None)?;
        let (b, t, _) = tokens.dims3()?;
        let mut ctx_mask = Vec::with_capacity(b * t);
        let mut pred_mask = Vec::with_capacity(b * t);
        let mut shrinks = 0;
        for i in 0..b {
            let m = sample_multiblock_mask(t, &cfg.mask, derive_seed(seed, &[i as u64]))?;
            shrinks += m.shrunk as u64;
            ctx_mask.extend(m.context_mask(t));
            pred_mask.extend(m.pred_mask(t));
        }
        let positions = pred_mask.iter().filter(|&&m| m).count();
        if positions == 0 {
            return Err(Error::Data("jepa: empty prediction blocks".into()));
        }
        let dtype = tokens.dtype();
        let visible = mask_tensor(&ctx_mask, &[b, t, 1], dtype)?;
        let h = student.backbone_forward(&tokens.broadcast_mul(&visible)?, ctx, None)?;
        let hidden = (1.0 - &visible)?;
        let inp = (h.broadcast_mul(&visible)? + hidden.broadcast_mul(self.mask_token.as_tensor())?)?;
        let pred = self.predictor.forward(&inp, ctx)?;
        let target = jepa_targets(&teacher.encode(x, &Ctx::target(), false)?.tokens)?;
        let loss = jepa_loss(&pred, &target, &mask_tensor(&pred_mask, &[b, t], dtype)?, cfg.beta)?;
        Ok(StepOutput {
            loss,
            update: PendingUpdate {
                jepa_shrinks: shrinks,
                ..Default::default()
            },
            positions,
        })
    }
}
