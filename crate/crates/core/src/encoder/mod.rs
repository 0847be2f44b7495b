//! The shared encoder: a convolutional stem followed by an SSM, Transformer
//! or Net1D backbone, with optional per-layer activation capture.

mod config;
mod net1d;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{BackboneConfig, BackboneFamily, EncoderConfig, StemConfig};
pub use net1d::Net1dStage;

use crate::error::{Error, Result};
use crate::nn::ops::gelu;
use crate::nn::{BatchNorm1d, Conv1d, Ctx, Init, LayerNorm, ParamGroup, ParamStore, SsmBlock, TransformerBlock};

#[derive(Debug, Clone)]
pub struct StemLayer {
    pub conv: Conv1d,
    pub bn: Option<BatchNorm1d>,
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Ssm(Vec<SsmBlock>),
    Transformer { blocks: Vec<TransformerBlock>, norm: LayerNorm },
    Net1d(Vec<Net1dStage>),
}

/// Token activations, `[batch, seq_tokens, model_dim]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: Tensor,
    /// One entry per stem layer, then one per backbone layer.
    pub per_layer: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub seed: u64,
    pub dtype: DType,
    pub params: ParamStore,
    pub stem: Vec<StemLayer>,
    pub backbone: Backbone,
}

pub fn build_encoder(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<Encoder> {
    Encoder::new(config, seed, dtype)
}

impl Encoder {
    pub fn new(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let causal = config.backbone.causal;

        let mut stem = Vec::new();
        {
            let mut init = Init::new(&mut params, &mut rng, ParamGroup::Stem, dtype);
            let s = &config.stem;
            let mut in_ch = config.in_channels;
            for i in 0..s.num_layers() {
                let mut layer = init.sub(&format!("stem.{i}"));
                let conv = Conv1d::new(
                    &mut layer.sub("conv"),
                    in_ch,
                    s.out_dims[i],
                    s.kernel_sizes[i],
                    s.strides[i],
                    s.dilations[i],
                    causal,
                )?;
                let bn = if s.use_batch_norm {
                    Some(BatchNorm1d::new(&mut layer.sub("bn"), s.out_dims[i])?)
                } else {
                    None
                };
                stem.push(StemLayer { conv, bn });
                in_ch = s.out_dims[i];
            }
        }

        let b = &config.backbone;
        let mut init = Init::new(&mut params, &mut rng, ParamGroup::Backbone, dtype);
        let backbone = match b.family {
            BackboneFamily::Ssm => Backbone::Ssm(
                (0..b.depth())
                    .map(|i| SsmBlock::new(&mut init.sub(&format!("backbone.{i}")), b.model_dim, b.state_dim, b.dropout, causal))
                    .collect::<Result<_>>()?,
            ),
            BackboneFamily::Transformer => Backbone::Transformer {
                blocks: (0..b.depth())
                    .map(|i| {
                        TransformerBlock::new(
                            &mut init.sub(&format!("backbone.{i}")),
                            b.model_dim,
                            b.num_heads,
                            b.ffn_mult,
                            b.dropout,
                            causal,
                        )
                    })
                    .collect::<Result<_>>()?,
                norm: LayerNorm::new(&mut init.sub("backbone.final_norm"), b.model_dim)?,
            },
            BackboneFamily::Net1d => {
                let mut in_ch = b.model_dim;
                let mut stages = Vec::new();
                for (i, w) in b.net1d_widths().into_iter().enumerate() {
                    stages.push(Net1dStage::new(
                        &mut init.sub(&format!("backbone.{i}")),
                        in_ch,
                        w,
                        b.net1d_kernel,
                        b.dropout,
                        causal,
                    )?);
                    in_ch = w;
                }
                Backbone::Net1d(stages)
            }
        };

        Ok(Encoder {
            config: config.clone(),
            seed,
            dtype,
            params,
            stem,
            backbone,
        })
    }

    /// Copy with its own parameter storage; `clone` shares the variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Encoder::new(&self.config, self.seed, self.dtype)?;
        copy.params.copy_from(&self.params)?;
        Ok(copy)
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim()
    }

    /// Stem forward: `[b, c, t] -> [b, t / stride_product, dim]`.
    pub fn stem_forward(&self, x: &Tensor, ctx: &Ctx, mut capture: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let (_, c, t) = x.dims3()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, encoder expects {}",
                self.config.in_channels
            )));
        }
        if self.config.seq_tokens(t) == 0 {
            return Err(Error::Shape(format!("input length {t} yields no tokens")));
        }
        let mut h = x.to_dtype(self.dtype)?;
        for layer in &self.stem {
            h = layer.conv.forward(&h)?;
            if let Some(bn) = &layer.bn {
                h = bn.forward(&h, ctx)?;
            }
            h = gelu(&h)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(h.transpose(1, 2)?.contiguous()?);
            }
        }
        Ok(h.transpose(1, 2)?.contiguous()?)
    }

    /// Backbone forward on `[b, l, dim]` tokens.
    pub fn backbone_forward(&self, tokens: &Tensor, ctx: &Ctx, mut capture: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let mut push = |t: &Tensor| {
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(t.clone());
            }
        };
        match &self.backbone {
            Backbone::Ssm(blocks) => {
                let mut h = tokens.clone();
                for block in blocks {
                    h = block.forward(&h, ctx)?;
                    push(&h);
                }
                Ok(h)
            }
            Backbone::Transformer { blocks, norm } => {
                let mut h = tokens.clone();
                for (i, block) in blocks.iter().enumerate() {
                    h = block.forward(&h, ctx)?;
                    if i + 1 == blocks.len() {
                        h = norm.forward(&h)?;
                    }
                    push(&h);
                }
                Ok(h)
            }
            Backbone::Net1d(stages) => {
                let mut h = tokens.transpose(1, 2)?.contiguous()?;
                for stage in stages {
                    h = stage.forward(&h, ctx)?;
                    push(&h.transpose(1, 2)?.contiguous()?);
                }
                Ok(h.transpose(1, 2)?.contiguous()?)
            }
        }
    }

    /// Full forward on a `[b, c, t]` batch.
    pub fn encode(&self, x: &Tensor, ctx: &Ctx, capture_layers: bool) -> Result<EncoderOutput> {
        let mut layers = Vec::new();
        let stem = self.stem_forward(x, ctx, capture_layers.then_some(&mut layers))?;
        let tokens = self.backbone_forward(&stem, ctx, capture_layers.then_some(&mut layers))?;
        Ok(EncoderOutput {
            tokens,
            per_layer: capture_layers.then_some(layers),
        })
    }

    /// Parameter counts for `stem`, `backbone` and `total`.
    pub fn count_parameters(&self) -> BTreeMap<String, usize> {
        let by_group = self.params.count_by_group();
        let mut out = BTreeMap::new();
        out.insert("stem".to_string(), by_group.get(&ParamGroup::Stem).copied().unwrap_or(0));
        out.insert("backbone".to_string(), by_group.get(&ParamGroup::Backbone).copied().unwrap_or(0));
        out.insert("total".to_string(), self.params.num_elements());
        out
    }

    /// Input samples a token may see beyond its aligned position
    /// (`token * stride_product`). Zero for causal encoders.
    pub fn receptive_slack(&self) -> usize {
        if self.config.backbone.causal {
            return 0;
        }
        let s = &self.config.stem;
        let mut slack = 0;
        let mut scale = 1;
        for i in 0..s.num_layers() {
            slack += scale * s.dilations[i] * (s.kernel_sizes[i] - 1) / 2;
            scale *= s.strides[i];
        }
        slack
    }
}

pub fn count_parameters(encoder: &Encoder) -> BTreeMap<String, usize> {
    encoder.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, Mode};
    use candle_core::Device;

    fn tiny(family: BackboneFamily, causal: bool) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            stem: StemConfig::with_dim(8),
            backbone: BackboneConfig {
                family,
                depth: Some(2),
                model_dim: 8,
                state_dim: 4,
                dropout: 0.1,
                causal,
                num_heads: 2,
                net1d_kernel: 3,
                ..Default::default()
            },
        }
    }

    fn input(b: usize, c: usize, t: usize, dtype: DType) -> Tensor {
        let v: Vec<f64> = (0..b * c * t).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        Tensor::from_vec(v, (b, c, t), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn shape_contract_all_families() {
        for family in [BackboneFamily::Ssm, BackboneFamily::Transformer, BackboneFamily::Net1d] {
            let enc = Encoder::new(&tiny(family, false), 1, DType::F32).unwrap();
            for t in [40, 41] {
                let out = enc.encode(&input(2, 3, t, DType::F32), &Ctx::eval(), true).unwrap();
                assert_eq!(out.tokens.dims(), &[2, t / 2, 8]);
                let layers = out.per_layer.unwrap();
                assert_eq!(layers.len(), 4 + 2);
                for l in &layers {
                    assert_eq!(&l.dims()[..2], &[2, t / 2]);
                }
                assert_eq!(layers.last().unwrap().dims(), &[2, t / 2, 8]);
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let enc = Encoder::new(&tiny(BackboneFamily::Ssm, false), 1, DType::F32).unwrap();
        assert!(matches!(
            enc.encode(&input(1, 4, 40, DType::F32), &Ctx::eval(), false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn same_seed_same_parameters_and_eval_is_deterministic() {
        let cfg = tiny(BackboneFamily::Ssm, false);
        let a = Encoder::new(&cfg, 9, DType::F32).unwrap();
        let b = Encoder::new(&cfg, 9, DType::F32).unwrap();
        assert_eq!(a.params.snapshot().unwrap(), b.params.snapshot().unwrap());
        let c = Encoder::new(&cfg, 10, DType::F32).unwrap();
        assert_ne!(a.params.snapshot().unwrap(), c.params.snapshot().unwrap());
        let x = input(2, 3, 40, DType::F32);
        let y1 = a.encode(&x, &Ctx::eval(), false).unwrap().tokens.to_vec3::<f32>().unwrap();
        let y2 = a.encode(&x, &Ctx::eval(), false).unwrap().tokens.to_vec3::<f32>().unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn causal_encoders_ignore_future_samples() {
        for family in [BackboneFamily::Ssm, BackboneFamily::Transformer, BackboneFamily::Net1d] {
            let enc = Encoder::new(&tiny(family, true), 3, DType::F64).unwrap();
            let t = 60;
            let k = 40;
            let x = input(1, 3, t, DType::F64);
            let mut v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for c in 0..3 {
                for s in k..t {
                    v[c * t + s] = 0.0;
                }
            }
            let z = Tensor::from_vec(v, (1, 3, t), &Device::Cpu).unwrap();
            let a = enc.encode(&x, &Ctx::eval(), false).unwrap().tokens.to_vec3::<f64>().unwrap();
            let b = enc.encode(&z, &Ctx::eval(), false).unwrap().tokens.to_vec3::<f64>().unwrap();
            let limit = k / 2 - 1;
            for pos in 0..limit {
                assert_eq!(a[0][pos], b[0][pos], "{family:?} token {pos}");
            }
            assert_ne!(a[0][t / 2 - 1], b[0][t / 2 - 1]);
        }
    }

    #[test]
    fn default_parameter_counts() {
        let enc = Encoder::new(&EncoderConfig::default(), 0, DType::F32).unwrap();
        let first = enc.params.get("stem.0.conv.weight").unwrap();
        assert_eq!(first.var.elem_count(), 12 * 512 * 3);
        let counts = enc.count_parameters();
        assert_eq!(counts["stem"] + counts["backbone"], counts["total"]);
        let total = counts["total"] as f64;
        assert!((2.5e6..3.5e6).contains(&total), "{total}");

        let mut cfg = EncoderConfig::default();
        cfg.backbone.family = BackboneFamily::Transformer;
        let total = Encoder::new(&cfg, 0, DType::F32).unwrap().count_parameters()["total"] as f64;
        assert!((total / 19.2e6 - 1.0).abs() < 0.25, "{total}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for family in [BackboneFamily::Ssm, BackboneFamily::Transformer, BackboneFamily::Net1d] {
            let enc = Encoder::new(&tiny(family, false), 5, DType::F64).unwrap();
            let x = input(2, 3, 24, DType::F64);
            let loss = || {
                let ctx = Ctx::new(Mode::Target, 0);
                let y = enc.encode(&x, &ctx, false)?.tokens;
                Ok((y.sum_all()? + y.sqr()?.sum_all()?)?)
            };
            let checks = check_gradients(&enc.params.params, loss, 20, 1e-5, 11).unwrap();
            for c in checks {
                assert!(c.rel_err < 1e-3, "{family:?} {c:?}");
            }
        }
    }
}
