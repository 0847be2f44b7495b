//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{DType, Tensor, D};

use crate::error::Result;

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Logistic function via `tanh`, which stays finite for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Gated linear unit over the last dimension: `a * sigmoid(b)`.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let h = x.dim(D::Minus1)? / 2;
    let a = x.narrow(D::Minus1, 0, h)?;
    let b = x.narrow(D::Minus1, h, h)?;
    Ok((a * sigmoid(&b)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Layer normalization over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Scales rows to unit L2 norm; norms below `eps` are clamped.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm.clamp(eps, f64::MAX)?)?)
}

/// Elementwise smooth-L1 (Huber with threshold `beta`); `beta = 0` is L1.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    let d = (pred - target)?.abs()?;
    if beta <= 0.0 {
        return Ok(d);
    }
    let quad = (d.sqr()? * (0.5 / beta))?;
    let lin = (&d - 0.5 * beta)?;
    let small = d.lt(beta)?;
    Ok(small.where_cond(&quad, &lin)?)
}

/// Mean of `values` over positions where `mask` is 1. `values` is `[.., n]`
/// reduced already to one value per position; `mask` has the same shape.
pub fn masked_mean(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.to_dtype(values.dtype())?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let total = (values * &mask)?.sum_all()?;
    Ok((total / count.max(1.0))?)
}

/// Binary cross-entropy on logits, averaged over all elements.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // max(x,0) - x*y + log(1 + exp(-|x|))
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((relu - (logits * targets)?)? + softplus)?.mean_all()?)
}

/// `[n]` mask tensor of zeros and ones from booleans.
pub fn mask_tensor(mask: &[bool], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
