use candle_core::{DType, Device, Tensor};

use super::layers::{Ctx, LayerNorm, Linear};
use super::ops::{gelu, softmax_last};
use super::params::Init;
use crate::error::{Error, Result};

/// Rotary position tables, `[len, head_dim]` each, in rotate-half layout.
pub fn rope_tables(len: usize, head_dim: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * head_dim);
    let mut sin = Vec::with_capacity(len * head_dim);
    for t in 0..len {
        for _ in 0..2 {
            for i in 0..half {
                let theta = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push((t as f64 * theta).cos());
                sin.push((t as f64 * theta).sin());
            }
        }
    }
    let cos = Tensor::from_vec(cos, (len, head_dim), &Device::Cpu)?.to_dtype(dtype)?;
    let sin = Tensor::from_vec(sin, (len, head_dim), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((cos, sin))
}

/// Applies rotary embeddings to `x: [b, heads, len, head_dim]`.
pub fn apply_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
    let hd = x.dim(3)?;
    let half = hd / 2;
    let x1 = x.narrow(3, 0, half)?;
    let x2 = x.narrow(3, half, half)?;
    let rotated = Tensor::cat(&[&x2.neg()?, &x1], 3)?;
    Ok((x.broadcast_mul(cos)? + rotated.broadcast_mul(sin)?)?)
}

/// Additive `[len, len]` mask with large negatives above the diagonal.
pub fn causal_mask(len: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..len * len)
        .map(|i| if i % len > i / len { -1e9 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (len, len), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize, causal: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 || (dim / heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "model_dim {dim} must split into {heads} heads of even size"
            )));
        }
        Ok(SelfAttention {
            q: Linear::new(&mut init.sub("q"), dim, dim, true)?,
            k: Linear::new(&mut init.sub("k"), dim, dim, true)?,
            v: Linear::new(&mut init.sub("v"), dim, dim, true)?,
            o: Linear::new(&mut init.sub("o"), dim, dim, true)?,
            heads,
            causal,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, h) = x.dims3()?;
        let hd = h / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let (cos, sin) = rope_tables(l, hd, x.dtype())?;
        let q = apply_rope(&split(self.q.forward(x)?)?, &cos, &sin)?;
        let k = apply_rope(&split(self.k.forward(x)?)?, &cos, &sin)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        if self.causal {
            scores = scores.broadcast_add(&causal_mask(l, x.dtype())?)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, h))?;
        self.o.forward(&out)
    }
}

/// Pre-norm transformer block: attention and a GELU feed-forward, each
/// followed by dropout and a residual add.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, dim: usize, heads: usize, ffn_mult: usize, dropout: f64, causal: bool) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&mut init.sub("norm1"), dim)?,
            attn: SelfAttention::new(&mut init.sub("attn"), dim, heads, causal)?,
            norm2: LayerNorm::new(&mut init.sub("norm2"), dim)?,
            ff_in: Linear::new(&mut init.sub("ff_in"), dim, ffn_mult * dim, true)?,
            ff_out: Linear::new(&mut init.sub("ff_out"), ffn_mult * dim, dim, true)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = (x + ctx.dropout(&a, self.dropout)?)?;
        let f = self.ff_out.forward(&gelu(&self.ff_in.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((&x + ctx.dropout(&f, self.dropout)?)?)
    }
}
