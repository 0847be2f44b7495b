use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ops::gelu;
use crate::nn::{BatchNorm1d, Conv1d, Ctx, Init};

/// Residual 1-D convolution stage: two conv/BN pairs with a 1x1 projection
/// on the skip path when the width changes. Stride 1 throughout; the stem
/// does all downsampling.
#[derive(Debug, Clone)]
pub struct Net1dStage {
    pub conv1: Conv1d,
    pub bn1: BatchNorm1d,
    pub conv2: Conv1d,
    pub bn2: BatchNorm1d,
    pub skip: Option<Conv1d>,
    pub dropout: f64,
}

impl Net1dStage {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize, dropout: f64, causal: bool) -> Result<Self> {
        Ok(Net1dStage {
            conv1: Conv1d::new(&mut init.sub("conv1"), in_ch, out_ch, kernel, 1, 1, causal)?,
            bn1: BatchNorm1d::new(&mut init.sub("bn1"), out_ch)?,
            conv2: Conv1d::new(&mut init.sub("conv2"), out_ch, out_ch, kernel, 1, 1, causal)?,
            bn2: BatchNorm1d::new(&mut init.sub("bn2"), out_ch)?,
            skip: if in_ch != out_ch {
                Some(Conv1d::new(&mut init.sub("skip"), in_ch, out_ch, 1, 1, 1, causal)?)
            } else {
                None
            },
            dropout,
        })
    }

    /// `[b, c_in, l] -> [b, c_out, l]`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = gelu(&self.bn1.forward(&self.conv1.forward(x)?, ctx)?)?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, ctx)?;
        let h = ctx.dropout(&h, self.dropout)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        gelu(&(h + skip)?)
    }
}
