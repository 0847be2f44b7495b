//! Diagonal state-space (S4D) layers.
//!
//! Each of the `H` channels runs an independent linear system with a complex
//! diagonal state matrix. The system is materialised as a length-`L`
//! convolution kernel (zero-order-hold discretisation, S4D-Lin
//! initialisation) and applied with a direct long convolution. Non-causal
//! layers add a second, anti-causal kernel with its own output matrix.

use std::f64::consts::PI;

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, Var};
use num_traits::Float;
use rand::Rng;

use super::layers::{Ctx, LayerNorm, Linear};
use super::ops::{gelu, glu};
use super::params::Init;
use crate::error::{Error, Result};

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s = s + a[j] * b[j];
    }
    s
}

/// Depthwise long convolution of `u: [b, h, l]` with `k: [h, l]`.
///
/// causal:      `y[t] = sum_{s=0..=t} k[s] u[t-s]`
/// anti-causal: `y[t] = sum_{s=0..l-2-t} k[s] u[t+1+s]`
#[derive(Debug, Clone, Copy)]
struct LongConv {
    anticausal: bool,
}

fn conv_forward<T: Float>(u: &[T], k: &[T], b: usize, h: usize, l: usize, anticausal: bool) -> Vec<T> {
    let mut y = vec![T::zero(); b * h * l];
    let mut kr = vec![T::zero(); l];
    for c in 0..h {
        let kc = &k[c * l..(c + 1) * l];
        for (i, v) in kr.iter_mut().enumerate() {
            *v = kc[l - 1 - i];
        }
        for bi in 0..b {
            let off = (bi * h + c) * l;
            let uc = &u[off..off + l];
            let yc = &mut y[off..off + l];
            for t in 0..l {
                yc[t] = if anticausal {
                    dot(&kc[..l - 1 - t], &uc[t + 1..])
                } else {
                    dot(&kr[l - 1 - t..], &uc[..=t])
                };
            }
        }
    }
    y
}

fn conv_backward<T: Float>(
    u: &[T],
    k: &[T],
    g: &[T],
    b: usize,
    h: usize,
    l: usize,
    anticausal: bool,
) -> (Vec<T>, Vec<T>) {
    let mut gu = vec![T::zero(); b * h * l];
    let mut gk = vec![T::zero(); h * l];
    let mut kr = vec![T::zero(); l];
    for c in 0..h {
        let kc = &k[c * l..(c + 1) * l];
        for (i, v) in kr.iter_mut().enumerate() {
            *v = kc[l - 1 - i];
        }
        let gkc = &mut gk[c * l..(c + 1) * l];
        for bi in 0..b {
            let off = (bi * h + c) * l;
            let uc = &u[off..off + l];
            let gc = &g[off..off + l];
            let guc = &mut gu[off..off + l];
            if anticausal {
                for j in 0..l {
                    guc[j] = dot(&gc[..j], &kr[l - j..]);
                }
                for s in 0..l.saturating_sub(1) {
                    gkc[s] = gkc[s] + dot(&gc[..l - 1 - s], &uc[s + 1..]);
                }
            } else {
                for j in 0..l {
                    guc[j] = dot(&gc[j..], &kc[..l - j]);
                }
                for s in 0..l {
                    gkc[s] = gkc[s] + dot(&gc[s..], &uc[..l - s]);
                }
            }
        }
    }
    (gu, gk)
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(Error::Shape("long convolution expects contiguous inputs".into())),
    }
}

impl CustomOp2 for LongConv {
    fn name(&self) -> &'static str {
        if self.anticausal {
            "long-conv-anticausal"
        } else {
            "long-conv-causal"
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, l) = l1.shape().dims3()?;
        let (hk, lk) = l2.shape().dims2()?;
        if hk != h || lk != l {
            candle_core::bail!("kernel shape {:?} does not match input {:?}", l2.shape(), l1.shape());
        }
        let to_candle = |e: Error| candle_core::Error::Msg(e.to_string());
        let out = match (s1, s2) {
            (CpuStorage::F32(u), CpuStorage::F32(k)) => CpuStorage::F32(conv_forward(
                contiguous_slice(u, l1).map_err(to_candle)?,
                contiguous_slice(k, l2).map_err(to_candle)?,
                b,
                h,
                l,
                self.anticausal,
            )),
            (CpuStorage::F64(u), CpuStorage::F64(k)) => CpuStorage::F64(conv_forward(
                contiguous_slice(u, l1).map_err(to_candle)?,
                contiguous_slice(k, l2).map_err(to_candle)?,
                b,
                h,
                l,
                self.anticausal,
            )),
            _ => candle_core::bail!("long convolution supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((b, h, l))))
    }

    fn bwd(
        &self,
        u: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, h, l) = u.dims3()?;
        let grad = grad.contiguous()?;
        let (gu, gk) = match u.dtype() {
            DType::F32 => {
                let (gu, gk) = conv_backward(
                    &u.flatten_all()?.to_vec1::<f32>()?,
                    &k.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    b,
                    h,
                    l,
                    self.anticausal,
                );
                (
                    Tensor::from_vec(gu, (b, h, l), u.device())?,
                    Tensor::from_vec(gk, (h, l), u.device())?,
                )
            }
            DType::F64 => {
                let (gu, gk) = conv_backward(
                    &u.flatten_all()?.to_vec1::<f64>()?,
                    &k.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    b,
                    h,
                    l,
                    self.anticausal,
                );
                (
                    Tensor::from_vec(gu, (b, h, l), u.device())?,
                    Tensor::from_vec(gk, (h, l), u.device())?,
                )
            }
            dt => candle_core::bail!("long convolution backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gu), Some(gk)))
    }
}

/// Differentiable depthwise long convolution, see [`LongConv`].
pub fn long_conv(u: &Tensor, k: &Tensor, anticausal: bool) -> Result<Tensor> {
    Ok(u.contiguous()?.apply_op2(&k.contiguous()?, LongConv { anticausal })?)
}

/// S4D convolution kernel generator.
#[derive(Debug, Clone)]
pub struct S4dKernel {
    pub log_dt: Var,
    pub log_a_real: Var,
    pub a_imag: Var,
    /// `[directions, h, modes]`
    pub c_real: Var,
    pub c_imag: Var,
    pub channels: usize,
    pub modes: usize,
    pub directions: usize,
}

impl S4dKernel {
    pub fn new(init: &mut Init, channels: usize, state_dim: usize, bidirectional: bool) -> Result<Self> {
        if state_dim < 2 || state_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "SSM state_dim must be even and >= 2 (conjugate pairs), got {state_dim}"
            )));
        }
        let modes = state_dim / 2;
        let directions = if bidirectional { 2 } else { 1 };
        let (dt_min, dt_max) = (1e-3f64, 1e-1f64);
        let log_dt: Vec<f64> = (0..channels)
            .map(|_| init.rng().gen_range(dt_min.ln()..dt_max.ln()))
            .collect();
        let log_dt = init.from_values("log_dt", &[channels], log_dt, false)?;
        let log_a_real = init.constant("log_a_real", &[channels, modes], 0.5f64.ln(), false)?;
        let a_imag: Vec<f64> = (0..channels)
            .flat_map(|_| (0..modes).map(|n| PI * n as f64))
            .collect();
        let a_imag = init.from_values("a_imag", &[channels, modes], a_imag, false)?;
        let std = 0.5f64.sqrt();
        let c_real = init.normal("c_real", &[directions, channels, modes], std, true)?;
        let c_imag = init.normal("c_imag", &[directions, channels, modes], std, true)?;
        Ok(S4dKernel {
            log_dt,
            log_a_real,
            a_imag,
            c_real,
            c_imag,
            channels,
            modes,
            directions,
        })
    }

    /// `[directions, h, len]` real kernel.
    pub fn kernel(&self, len: usize) -> Result<Tensor> {
        let (h, n) = (self.channels, self.modes);
        let dt = self.log_dt.as_tensor().exp()?.reshape((h, 1))?;
        let a_re = self.log_a_real.as_tensor().exp()?.neg()?;
        let a_im = self.a_imag.as_tensor();
        let dta_re = a_re.broadcast_mul(&dt)?;
        let dta_im = a_im.broadcast_mul(&dt)?;

        // zero-order hold: C' = C (exp(dt A) - 1) / A
        let e = dta_re.exp()?;
        let num_re = ((&e * dta_im.cos()?)? - 1.0)?;
        let num_im = (&e * dta_im.sin()?)?;
        let den = (a_re.sqr()? + a_im.sqr()?)?;
        let q_re = ((&num_re * &a_re)? + (&num_im * a_im)?)?.div(&den)?;
        let q_im = ((&num_im * &a_re)? - (&num_re * a_im)?)?.div(&den)?;
        let c_re = self.c_real.as_tensor();
        let c_im = self.c_imag.as_tensor();
        let cp_re = (c_re.broadcast_mul(&q_re)? - c_im.broadcast_mul(&q_im)?)?;
        let cp_im = (c_re.broadcast_mul(&q_im)? + c_im.broadcast_mul(&q_re)?)?;

        // Vandermonde exp(dt A l)
        let steps: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let steps = Tensor::from_vec(steps, (1, 1, len), dt.device())?.to_dtype(dt.dtype())?;
        let mag = dta_re.reshape((h, n, 1))?.broadcast_mul(&steps)?.exp()?;
        let ang = dta_im.reshape((h, n, 1))?.broadcast_mul(&steps)?;
        let v_re = (&mag * ang.cos()?)?.unsqueeze(0)?;
        let v_im = (&mag * ang.sin()?)?.unsqueeze(0)?;
        let d = self.directions;
        let k = (cp_re.reshape((d, h, n, 1))?.broadcast_mul(&v_re)?
            - cp_im.reshape((d, h, n, 1))?.broadcast_mul(&v_im)?)?
            .sum(2)?;
        Ok((k * 2.0)?)
    }
}

/// One residual state-space block: S4D convolution with skip term, GELU,
/// gated output projection, dropout, residual add, post layer norm.
#[derive(Debug, Clone)]
pub struct SsmBlock {
    pub kernel: S4dKernel,
    pub d_skip: Var,
    pub out_proj: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
    pub causal: bool,
}

impl SsmBlock {
    pub fn new(init: &mut Init, dim: usize, state_dim: usize, dropout: f64, causal: bool) -> Result<Self> {
        let kernel = S4dKernel::new(&mut init.sub("kernel"), dim, state_dim, !causal)?;
        let d_skip = init.normal("d_skip", &[dim], 1.0, true)?;
        let out_proj = Linear::new(&mut init.sub("out_proj"), dim, 2 * dim, true)?;
        let norm = LayerNorm::new(&mut init.sub("norm"), dim)?;
        Ok(SsmBlock {
            kernel,
            d_skip,
            out_proj,
            norm,
            dropout,
            causal,
        })
    }

    /// `[b, l, h] -> [b, l, h]`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, l, h) = x.dims3()?;
        let u = x.transpose(1, 2)?.contiguous()?;
        let k = self.kernel.kernel(l)?;
        let mut y = long_conv(&u, &k.get(0)?, false)?;
        if !self.causal {
            y = (y + long_conv(&u, &k.get(1)?, true)?)?;
        }
        y = (y + u.broadcast_mul(&self.d_skip.as_tensor().reshape((1, h, 1))?)?)?;
        let y = gelu(&y)?.transpose(1, 2)?;
        let y = glu(&self.out_proj.forward(&y)?)?;
        let y = ctx.dropout(&y, self.dropout)?;
        self.norm.forward(&(y + x)?)
    }
}
