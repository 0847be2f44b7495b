use candle_core::{Tensor, Var, D};

use super::codebook::Codebook;
use super::config::DinosrConfig;
use super::{replace_masked, span_masks, PendingUpdate, StepOutput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ops::{layer_norm, log_softmax_last, mask_tensor, masked_mean};
use crate::nn::{Ctx, Init, Linear, SsmBlock};
use crate::seed::derive_seed;

/// Mask embedding, a non-causal SSM prediction layer, one linear classifier
/// per codebook, and the codebooks themselves.
#[derive(Debug, Clone)]
pub struct DinosrHead {
    pub mask_emb: Var,
    pub head: SsmBlock,
    pub classifiers: Vec<Linear>,
    pub codebooks: Vec<Codebook>,
}

fn one_hot(labels: &[u32], k: usize, shape: &[usize], like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        v[i * k + l as usize] = 1.0;
    }
    let mut dims = shape.to_vec();
    dims.push(k);
    Ok(Tensor::from_vec(v, dims, like.device())?.to_dtype(like.dtype())?)
}

/// Cross-entropy of `logits[i]: [b, t, K_i]` (divided by `temperature`)
/// against `labels[i]` (flattened `[b * t]`), averaged over masked positions
/// and then over codebooks.
pub fn dinosr_loss(logits: &[Tensor], labels: &[Vec<u32>], mask: &Tensor, temperature: f64) -> Result<Tensor> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Shape("one label set per codebook classifier required".into()));
    }
    let mut total: Option<Tensor> = None;
    for (lg, lb) in logits.iter().zip(labels) {
        let (b, t, k) = lg.dims3()?;
        let logp = log_softmax_last(&(lg / temperature)?)?;
        let nll = (logp * one_hot(lb, k, &[b, t], lg)?)?.sum(D::Minus1)?.neg()?;
        let l = masked_mean(&nll, mask)?;
        total = Some(match total {
            Some(acc) => (acc + l)?,
            None => l,
        });
    }
    Ok((total.expect("non-empty") / logits.len() as f64)?)
}

impl DinosrHead {
    pub fn new(init: &mut Init, encoder: &EncoderConfig, cfg: &DinosrConfig, state_seed: u64) -> Result<Self> {
        let b = &encoder.backbone;
        let classifiers = cfg
            .codebook_sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| Linear::new(&mut init.sub(&format!("classifier.{i}")), b.model_dim, k, true))
            .collect::<Result<_>>()?;
        let codebooks = cfg
            .codebook_sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| Codebook::new(k, b.model_dim, cfg.codebook_momentum, derive_seed(state_seed, &[i as u64]), init.dtype))
            .collect::<Result<_>>()?;
        Ok(DinosrHead {
            mask_emb: init.normal("mask_emb", &[b.model_dim], 0.1, false)?,
            head: SsmBlock::new(&mut init.sub("predictor"), b.model_dim, b.state_dim, b.dropout, false)?,
            classifiers,
            codebooks,
        })
    }

    pub fn forward(
        &self,
        cfg: &DinosrConfig,
        student: &Encoder,
        teacher: &Encoder,
        x: &Tensor,
        ctx: &Ctx,
        seed: u64,
    ) -> Result<StepOutput> {
        let tokens = student.stem_forward(x, ctx, None)?;
        let (b, t, dim) = tokens.dims3()?;
        let mask = span_masks(b, t, &cfg.mask, seed)?;
        let positions = mask.iter().filter(|&&m| m).count();
        if positions == 0 {
            log::warn!("dinosr: empty mask, loss is zero for this batch");
        }
        let h = student.backbone_forward(&replace_masked(&tokens, &mask, &self.mask_emb)?, ctx, None)?;
        let h = self.head.forward(&h, ctx)?;
        let logits = self
            .classifiers
            .iter()
            .map(|c| c.forward(&h))
            .collect::<Result<Vec<_>>>()?;

        let t_out = teacher.encode(x, &Ctx::target(), true)?;
        let layers = t_out.per_layer.expect("captured");
        let n = self.codebooks.len();
        let top = &layers[layers.len() - n..];
        let mut labels = Vec::with_capacity(n);
        let mut update = PendingUpdate::default();
        for (layer, cb) in top.iter().zip(&self.codebooks) {
            let f = layer_norm(&layer.detach(), 1e-5)?.reshape((b * t, dim))?;
            let l = cb.assign(&f)?;
            labels.push(l.clone());
            update.codebooks.push((f, l));
        }
        let loss = dinosr_loss(&logits, &labels, &mask_tensor(&mask, &[b, t], h.dtype())?, cfg.temperature)?;
        Ok(StepOutput {
            loss,
            update,
            positions,
        })
    }
}
