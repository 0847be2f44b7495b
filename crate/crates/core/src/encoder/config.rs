use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemConfig {
    pub out_dims: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub use_batch_norm: bool,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            out_dims: vec![512; 4],
            kernel_sizes: vec![3, 1, 1, 1],
            strides: vec![2, 1, 1, 1],
            dilations: vec![1; 4],
            use_batch_norm: true,
        }
    }
}

impl StemConfig {
    /// Stem with every layer `dim` wide and the default kernels and strides.
    pub fn with_dim(dim: usize) -> Self {
        StemConfig {
            out_dims: vec![dim; 4],
            ..Default::default()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.out_dims.len()
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.out_dims.len();
        if n == 0 {
            return Err(Error::Config("stem needs at least one layer".into()));
        }
        for (name, len) in [
            ("kernel_sizes", self.kernel_sizes.len()),
            ("strides", self.strides.len()),
            ("dilations", self.dilations.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!(
                    "stem.{name} has {len} entries but stem.out_dims has {n}"
                )));
            }
        }
        let all = self.out_dims.iter().chain(&self.kernel_sizes).chain(&self.strides).chain(&self.dilations);
        if all.into_iter().any(|&v| v == 0) {
            return Err(Error::Config("stem dims, kernels, strides and dilations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    Ssm,
    Transformer,
    Net1d,
}

impl BackboneFamily {
    pub fn default_depth(self) -> usize {
        match self {
            BackboneFamily::Ssm => 4,
            BackboneFamily::Transformer => 6,
            BackboneFamily::Net1d => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: BackboneFamily,
    /// Family default when absent.
    pub depth: Option<usize>,
    pub model_dim: usize,
    pub state_dim: usize,
    pub dropout: f64,
    pub causal: bool,
    pub num_heads: usize,
    pub ffn_mult: usize,
    /// Net1D stage widths; defaults to a ramp ending at `model_dim`.
    pub net1d_widths: Option<Vec<usize>>,
    pub net1d_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            family: BackboneFamily::Ssm,
            depth: None,
            model_dim: 512,
            state_dim: 8,
            dropout: 0.2,
            causal: false,
            num_heads: 8,
            ffn_mult: 4,
            net1d_widths: None,
            net1d_kernel: 5,
        }
    }
}

impl BackboneConfig {
    pub fn depth(&self) -> usize {
        self.depth.unwrap_or_else(|| self.family.default_depth())
    }

    pub fn net1d_widths(&self) -> Vec<usize> {
        if let Some(w) = &self.net1d_widths {
            return w.clone();
        }
        let d = self.model_dim;
        let ramp = [d / 4, d / 4, d / 2, d / 2, d, d, d];
        let depth = self.depth();
        let mut widths: Vec<usize> = (0..depth).map(|i| ramp[i * ramp.len() / depth].max(1)).collect();
        if let Some(last) = widths.last_mut() {
            *last = d;
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 {
            return Err(Error::Config("backbone.model_dim must be positive".into()));
        }
        if self.depth() == 0 {
            return Err(Error::Config("backbone.depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("backbone.dropout {} outside [0, 1)", self.dropout)));
        }
        match self.family {
            BackboneFamily::Ssm if self.state_dim == 0 => {
                Err(Error::Config("backbone.state_dim must be positive".into()))
            }
            BackboneFamily::Net1d => {
                let w = self.net1d_widths();
                if w.len() != self.depth() {
                    return Err(Error::Config(format!(
                        "backbone.net1d_widths has {} entries for depth {}",
                        w.len(),
                        self.depth()
                    )));
                }
                if w.last() != Some(&self.model_dim) || w.contains(&0) {
                    return Err(Error::Config("backbone.net1d_widths must be positive and end at model_dim".into()));
                }
                if self.net1d_kernel == 0 {
                    return Err(Error::Config("backbone.net1d_kernel must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem: StemConfig,
    pub backbone: BackboneConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 12,
            stem: StemConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("encoder.in_channels must be positive".into()));
        }
        self.stem.validate()?;
        self.backbone.validate()?;
        let last = *self.stem.out_dims.last().expect("validated");
        if last != self.backbone.model_dim {
            return Err(Error::Config(format!(
                "last stem dim {last} differs from backbone.model_dim {}",
                self.backbone.model_dim
            )));
        }
        Ok(())
    }

    /// Tokens produced for an input of `len` samples.
    pub fn seq_tokens(&self, len: usize) -> usize {
        let mut l = len;
        for &s in &self.stem.strides {
            l /= s;
        }
        l
    }

    pub fn model_dim(&self) -> usize {
        self.backbone.model_dim
    }

    /// Number of captured layers: stem layers plus backbone layers.
    pub fn num_layers(&self) -> usize {
        self.stem.num_layers() + self.backbone.depth()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.seq_tokens(600), 300);
        assert_eq!(cfg.num_layers(), 8);
        let mut b = BackboneConfig {
            family: BackboneFamily::Net1d,
            ..Default::default()
        };
        assert_eq!(b.net1d_widths(), vec![128, 128, 256, 256, 512, 512, 512]);
        b.depth = Some(3);
        assert_eq!(b.net1d_widths().last(), Some(&512));
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut cfg = EncoderConfig::default();
        cfg.stem.strides = vec![2, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.backbone.model_dim = 256;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_family_and_keys_rejected() {
        assert!(toml::from_str::<BackboneConfig>("family = \"lstm\"").is_err());
        assert!(toml::from_str::<BackboneConfig>("modle_dim = 3").is_err());
        let b: BackboneConfig = toml::from_str("family = \"transformer\"").unwrap();
        assert_eq!(b.depth(), 6);
    }
}
