use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;

use super::config::HubertppConfig;
use super::prototypes::PrototypeBank;
use super::sinkhorn::sinkhorn_knopp;
use super::{replace_masked, span_masks, PendingUpdate, StepOutput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ops::{gelu, l2_normalize, log_softmax_last, mask_tensor, masked_mean};
use crate::nn::{Ctx, Init, Linear};
use crate::seed::derive_seed;

/// Student projector and MLP predictor, the EMA projector of the teacher
/// path, and one prototype bank per configured size.
#[derive(Debug, Clone)]
pub struct HubertppHead {
    pub mask_emb: Var,
    pub projector: Linear,
    pub pred_in: Linear,
    pub pred_out: Linear,
    pub teacher_projector: Linear,
    pub banks: Vec<PrototypeBank>,
}

fn to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (n, d) = t.dims2()?;
    Array2::from_shape_vec((n, d), t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        .map_err(|e| Error::Shape(e.to_string()))
}

/// `sum_b [alpha * mean_masked KL(q_b || p_b) + (1 - alpha) * mean_unmasked KL(q_b || p_b)]`
/// where `p_b = softmax(student_logits[b])` and `q_b = targets[b]`, all
/// `[n, K_b]` with `mask` over the `n` rows. If every row is masked (or none
/// is) the remaining term alone is used.
pub fn hubertpp_loss(student_logits: &[Tensor], targets: &[Array2<f64>], mask: &[bool], alpha: f64) -> Result<Tensor> {
    if student_logits.is_empty() || student_logits.len() != targets.len() {
        return Err(Error::Shape("one target matrix per prototype bank required".into()));
    }
    let n = mask.len();
    let masked = mask.iter().filter(|&&m| m).count();
    let (w_m, w_u) = match masked {
        0 => (0.0, 1.0),
        m if m == n => (1.0, 0.0),
        _ => (alpha, 1.0 - alpha),
    };
    let mut total: Option<Tensor> = None;
    for (logits, q) in student_logits.iter().zip(targets) {
        let (rows, k) = logits.dims2()?;
        if rows != n || q.dim() != (rows, k) {
            return Err(Error::Shape(format!("logits {:?} vs targets {:?} vs mask {n}", logits.dims(), q.dim())));
        }
        let dtype = logits.dtype();
        let q_t = Tensor::from_vec(q.iter().cloned().collect::<Vec<f64>>(), (n, k), &Device::Cpu)?.to_dtype(dtype)?;
        let neg_entropy: Vec<f64> = q
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum())
            .collect();
        let neg_entropy = Tensor::from_vec(neg_entropy, n, &Device::Cpu)?.to_dtype(dtype)?;
        let cross = (log_softmax_last(logits)? * q_t)?.sum(D::Minus1)?;
        let kl = (neg_entropy - cross)?;
        let m = mask_tensor(mask, &[n], dtype)?;
        let mut l = (masked_mean(&kl, &m)? * w_m)?;
        if w_u > 0.0 {
            l = (l + (masked_mean(&kl, &(1.0 - &m)?)? * w_u)?)?;
        }
        total = Some(match total {
            Some(acc) => (acc + l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

impl HubertppHead {
    pub fn new(
        init: &mut Init,
        teacher_init: &mut Init,
        encoder: &EncoderConfig,
        cfg: &HubertppConfig,
        state_seed: u64,
    ) -> Result<Self> {
        let d = encoder.backbone.model_dim;
        let p = cfg.proj_dim.unwrap_or(d);
        let banks = cfg
            .prototype_sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                PrototypeBank::new(
                    k,
                    p,
                    cfg.prototype_momentum,
                    cfg.freeze_prototypes_steps,
                    cfg.temperature,
                    derive_seed(state_seed, &[100 + i as u64]),
                    init.dtype,
                )
            })
            .collect::<Result<_>>()?;
        Ok(HubertppHead {
            mask_emb: init.normal("mask_emb", &[d], 0.1, false)?,
            projector: Linear::new(&mut init.sub("projector"), d, p, true)?,
            pred_in: Linear::new(&mut init.sub("predictor.0"), p, d, true)?,
            pred_out: Linear::new(&mut init.sub("predictor.1"), d, p, true)?,
            teacher_projector: Linear::new(&mut teacher_init.sub("projector"), d, p, true)?,
            banks,
        })
    }

    /// Student parameters mirrored by the teacher projector, in the order
    /// the teacher store holds them.
    pub fn student_projector_vars(&self) -> Vec<Var> {
        let mut v = vec![self.projector.weight.clone()];
        v.extend(self.projector.bias.clone());
        v
    }

    pub fn forward(
        &self,
        cfg: &HubertppConfig,
        student: &Encoder,
        teacher: &Encoder,
        x: &Tensor,
        ctx: &Ctx,
        seed: u64,
    ) -> Result<StepOutput> {
        let tokens = student.stem_forward(x, ctx, None)?;
        let (b, t, _) = tokens.dims3()?;
        let n = b * t;
        let mask = span_masks(b, t, &cfg.mask, seed)?;
        let h = student.backbone_forward(&replace_masked(&tokens, &mask, &self.mask_emb)?, ctx, None)?;
        let z = self.projector.forward(&h)?;
        let z = self.pred_out.forward(&gelu(&self.pred_in.forward(&z)?)?)?;
        let p = z.dim(D::Minus1)?;
        let s = l2_normalize(&z.reshape((n, p))?, 1e-12)?;

        let tt = teacher.encode(x, &Ctx::target(), false)?.tokens;
        let f = l2_normalize(&self.teacher_projector.forward(&tt)?.reshape((n, p))?.detach(), 1e-12)?;
        let f_arr = to_array(&f)?;

        let mut logits = Vec::with_capacity(self.banks.len());
        let mut targets = Vec::with_capacity(self.banks.len());
        let mut update = PendingUpdate::default();
        for bank in &self.banks {
            let protos = bank.prototypes.as_tensor().detach();
            logits.push((s.matmul(&protos.t()?)? / cfg.temperature)?);
            let mut scores = f_arr.dot(&bank.to_array()?.t());
            if cfg.teacher_logits_divide_by_temperature {
                scores /= cfg.temperature;
            }
            let q = sinkhorn_knopp(&scores, cfg.sinkhorn_iters, cfg.sinkhorn_epsilon)?;
            targets.push(q.clone());
            update.prototypes.push((f_arr.clone(), q));
        }
        let loss = hubertpp_loss(&logits, &targets, &mask, cfg.alpha)?;
        Ok(StepOutput {
            loss,
            update,
            positions: n,
        })
    }
}
