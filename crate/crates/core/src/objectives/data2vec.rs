use candle_core::{Tensor, Var, D};

use super::config::Data2vecConfig;
use super::{replace_masked, span_masks, PendingUpdate, StepOutput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ops::{layer_norm, mask_tensor, masked_mean, smooth_l1};
use crate::nn::{Ctx, Init, SsmBlock};

/// Learned mask embedding plus a single non-causal SSM prediction layer.
#[derive(Debug, Clone)]
pub struct Data2vecHead {
    pub mask_emb: Var,
    pub head: SsmBlock,
}

/// Layer-normalized mean of the top `k` layers.
pub fn data2vec_targets(layers: &[Tensor], top_k: usize) -> Result<Tensor> {
    if top_k == 0 || top_k > layers.len() {
        return Err(Error::Shape(format!("need {top_k} teacher layers, have {}", layers.len())));
    }
    let top = &layers[layers.len() - top_k..];
    let mean = (Tensor::stack(top, 0)?.sum(0)? / top_k as f64)?;
    layer_norm(&mean.detach(), 1e-5)
}

/// Smooth-L1 between `pred` and `target` (`[b, t, d]`), averaged over the
/// feature dim and the positions where `mask: [b, t]` is 1. An empty mask
/// yields zero.
pub fn data2vec_loss(pred: &Tensor, target: &Tensor, mask: &Tensor, beta: f64) -> Result<Tensor> {
    let per_pos = smooth_l1(pred, target, beta)?.mean(D::Minus1)?;
    masked_mean(&per_pos, mask)
}

impl Data2vecHead {
    pub fn new(init: &mut Init, encoder: &EncoderConfig) -> Result<Self> {
        let b = &encoder.backbone;
        Ok(Data2vecHead {
            mask_emb: init.normal("mask_emb", &[b.model_dim], 0.1, false)?,
            head: SsmBlock::new(&mut init.sub("predictor"), b.model_dim, b.state_dim, b.dropout, false)?,
        })
    }

    pub fn forward(
        &self,
        cfg: &Data2vecConfig,
        student: &Encoder,
        teacher: &Encoder,
        x: &Tensor,
        ctx: &Ctx,
        seed: u64,
    ) -> Result<StepOutput> {
        let tokens = student.stem_forward(x, ctx, None)?;
        let (b, t, _) = tokens.dims3()?;
        let mask = span_masks(b, t, &cfg.mask, seed)?;
        let positions = mask.iter().filter(|&&m| m).count();
        if positions == 0 {
            log::warn!("data2vec: empty mask, loss is zero for this batch");
        }
        let h = student.backbone_forward(&replace_masked(&tokens, &mask, &self.mask_emb)?, ctx, None)?;
        let pred = self.head.forward(&h, ctx)?;
        let t_out = teacher.encode(x, &Ctx::target(), true)?;
        let layers = t_out.per_layer.expect("captured");
        let backbone_layers = &layers[teacher.config.stem.num_layers()..];
        let target = data2vec_targets(backbone_layers, cfg.top_k_layers)?;
        let loss = data2vec_loss(&pred, &target, &mask_tensor(&mask, &[b, t], pred.dtype())?, cfg.beta)?;
        Ok(StepOutput {
            loss,
            update: PendingUpdate::default(),
            positions,
        })
    }
}
