use std::cell::RefCell;

use candle_core::{Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::Init;
use crate::error::Result;

/// How stochastic and stateful layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch statistics, running statistics updated.
    Train,
    /// No dropout, running statistics.
    Eval,
    /// No dropout, batch statistics, nothing updated. Used by EMA teachers
    /// and for validation losses.
    Target,
}

/// Per-forward context: the mode plus the RNG that drives dropout.
pub struct Ctx {
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Ctx {
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train, seed)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn target() -> Self {
        Self::new(Mode::Target, 0)
    }

    /// Same RNG stream, different mode.
    pub fn with_mode(&self, mode: Mode) -> Ctx {
        Ctx {
            mode,
            rng: RefCell::new(self.rng.borrow().clone()),
        }
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if self.mode != Mode::Train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialization for weight and bias.
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_bound(init, in_dim, out_dim, bias, bound)
    }

    pub fn with_bound(init: &mut Init, in_dim: usize, out_dim: usize, bias: bool, bound: f64) -> Result<Self> {
        let weight = init.uniform("weight", &[out_dim, in_dim], bound, true)?;
        let bias = if bias {
            Some(init.uniform("bias", &[out_dim], 1.0 / (in_dim as f64).sqrt(), false)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, self.in_dim))?;
        let mut y = flat.matmul(&self.weight.as_tensor().t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Var,
    pub bias: Var,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub causal: bool,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel_size: usize,
        stride: usize,
        dilation: usize,
        causal: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel_size) as f64).sqrt();
        let weight = init.uniform("weight", &[out_ch, in_ch, kernel_size], bound, true)?;
        let bias = init.uniform("bias", &[out_ch], bound, false)?;
        Ok(Conv1d {
            weight,
            bias,
            kernel_size,
            stride,
            dilation,
            causal,
        })
    }

    /// `[b, c_in, l] -> [b, c_out, l / stride]`. "Same" padding, or
    /// left-only padding when causal. Computed as im2col plus matmul.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, l) = x.dims3()?;
        let (c_out, _, k) = self.weight.as_tensor().dims3()?;
        let span = self.dilation * (k - 1);
        let (left, right) = if self.causal { (span, 0) } else { (span / 2, span - span / 2) };
        let padded = if span > 0 { x.pad_with_zeros(2, left, right)? } else { x.clone() };
        let cols = if k == 1 {
            padded
        } else {
            let taps = (0..k)
                .map(|j| padded.narrow(2, j * self.dilation, l))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::stack(&taps, 2)?.reshape((b, c_in * k, l))?
        };
        let out_len = l / self.stride;
        let cols = if self.stride > 1 {
            let idx: Vec<u32> = (0..out_len).map(|i| (i * self.stride) as u32).collect();
            cols.index_select(&Tensor::new(idx.as_slice(), x.device())?, 2)?
        } else {
            cols
        };
        let w = self.weight.as_tensor().reshape((1, c_out, c_in * k))?.broadcast_as((b, c_out, c_in * k))?;
        let y = w.contiguous()?.matmul(&cols.contiguous()?)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().unsqueeze(0)?.unsqueeze(2)?)?)
    }
}

/// Batch normalization over `[b, c, l]`, statistics per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(BatchNorm1d {
            gamma: init.constant("gamma", &[channels], 1.0, false)?,
            beta: init.constant("beta", &[channels], 0.0, false)?,
            running_mean: init.buffer("running_mean", &[channels], 0.0)?,
            running_var: init.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let (mean, var) = match ctx.mode {
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1))?,
            ),
            Mode::Train | Mode::Target => {
                let mean = x.mean_keepdim(2)?.mean_keepdim(0)?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(2)?.mean_keepdim(0)?;
                if ctx.mode == Mode::Train {
                    let n = (b * l) as f64;
                    let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
                    let m = self.momentum;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                        + (mean.detach().flatten_all()? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                (mean, var)
            }
        };
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1))?)?)
    }
}

/// Layer normalization over the last dimension with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant("gamma", &[dim], 1.0, false)?,
            beta: init.constant("beta", &[dim], 0.0, false)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{ParamGroup, ParamStore};
    use candle_core::{DType, Device};

    #[test]
    fn conv_output_lengths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Stem, DType::F32);
        let c = Conv1d::new(&mut init.sub("c"), 3, 5, 3, 2, 1, false).unwrap();
        for (l, want) in [(600, 300), (601, 300), (7, 3)] {
            let x = Tensor::zeros((2, 3, l), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, want]);
        }
        let cc = Conv1d::new(&mut init.sub("cc"), 3, 5, 3, 1, 2, true).unwrap();
        let x = Tensor::zeros((1, 3, 50), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(cc.forward(&x).unwrap().dims(), &[1, 5, 50]);
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Stem, DType::F64);
        let c = Conv1d::new(&mut init, 2, 2, 5, 1, 1, true).unwrap();
        let a: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let mut b = a.clone();
        for v in b.iter_mut().skip(30) {
            *v = 9.0;
        }
        let ya = c.forward(&Tensor::from_vec(a, (1, 2, 20), &Device::Cpu).unwrap()).unwrap();
        let yb = c.forward(&Tensor::from_vec(b, (1, 2, 20), &Device::Cpu).unwrap()).unwrap();
        let (ya, yb) = (ya.to_vec3::<f64>().unwrap(), yb.to_vec3::<f64>().unwrap());
        // channel 1 holds samples 20..40, perturbed from index 10 on
        assert_eq!(ya[0][1][..10], yb[0][1][..10]);
        assert_ne!(ya[0][1][10], yb[0][1][10]);
    }

    #[test]
    fn batch_norm_modes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Stem, DType::F64);
        let bn = BatchNorm1d::new(&mut init, 2).unwrap();
        let x = Tensor::new(&[[[1.0f64, 3.0], [10.0, 10.0]]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, &Ctx::target()).unwrap().to_vec3::<f64>().unwrap();
        assert!((y[0][0][0] + 1.0).abs() < 1e-4 && y[0][1][0].abs() < 1e-12);
        assert_eq!(bn.running_mean.as_tensor().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
        bn.forward(&x, &Ctx::train(0)).unwrap();
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 1.0).abs() < 1e-12);
        let rv = bn.running_var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_train() {
        let x = Tensor::ones((1000,), DType::F32, &Device::Cpu).unwrap();
        let e = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(e.to_vec1::<f32>().unwrap(), vec![1.0; 1000]);
        let t = Ctx::train(3).dropout(&x, 0.5).unwrap().to_vec1::<f32>().unwrap();
        let zeros = t.iter().filter(|v| **v == 0.0).count();
        assert!((400..600).contains(&zeros));
        assert!(t.iter().all(|v| *v == 0.0 || *v == 2.0));
        assert_eq!(t, Ctx::train(3).dropout(&x, 0.5).unwrap().to_vec1::<f32>().unwrap());
    }
}
