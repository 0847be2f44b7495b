use serde::{Deserialize, Serialize};

use super::ema::EmaConfig;
use super::masking::{BlockMaskSpec, SpanMaskSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Data2vec,
    Dinosr,
    Jepa,
    Cpc,
    Hubertpp,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Data2vec,
        ObjectiveKind::Dinosr,
        ObjectiveKind::Jepa,
        ObjectiveKind::Cpc,
        ObjectiveKind::Hubertpp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Data2vec => "data2vec",
            ObjectiveKind::Dinosr => "dinosr",
            ObjectiveKind::Jepa => "jepa",
            ObjectiveKind::Cpc => "cpc",
            ObjectiveKind::Hubertpp => "hubertpp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective kind '{s}'")))
    }

    pub fn default_config(self) -> ObjectiveConfig {
        match self {
            ObjectiveKind::Data2vec => ObjectiveConfig::Data2vec(Default::default()),
            ObjectiveKind::Dinosr => ObjectiveConfig::Dinosr(Default::default()),
            ObjectiveKind::Jepa => ObjectiveConfig::Jepa(Default::default()),
            ObjectiveKind::Cpc => ObjectiveConfig::Cpc(Default::default()),
            ObjectiveKind::Hubertpp => ObjectiveConfig::Hubertpp(Default::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Data2vecConfig {
    pub mask: SpanMaskSpec,
    pub ema: EmaConfig,
    pub top_k_layers: usize,
    pub beta: f64,
}

impl Default for Data2vecConfig {
    fn default() -> Self {
        Data2vecConfig {
            mask: SpanMaskSpec::default(),
            ema: EmaConfig::default(),
            top_k_layers: 2,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinosrConfig {
    pub mask: SpanMaskSpec,
    pub ema: EmaConfig,
    /// One codebook per entry, attached to the top backbone layers in order.
    pub codebook_sizes: Vec<usize>,
    pub codebook_momentum: f64,
    pub temperature: f64,
}

impl Default for DinosrConfig {
    fn default() -> Self {
        DinosrConfig {
            mask: SpanMaskSpec::default(),
            ema: EmaConfig::default(),
            codebook_sizes: vec![256, 256],
            codebook_momentum: 0.9,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JepaConfig {
    pub mask: BlockMaskSpec,
    pub ema: EmaConfig,
    pub beta: f64,
}

impl Default for JepaConfig {
    fn default() -> Self {
        JepaConfig {
            mask: BlockMaskSpec::default(),
            ema: EmaConfig::default(),
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcConfig {
    pub num_steps: usize,
    /// Projection weights start in `±scale / sqrt(dim)`, so initial scores
    /// are near zero and the loss starts near `ln N`.
    pub projection_init_scale: f64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        CpcConfig {
            num_steps: 14,
            projection_init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HubertppConfig {
    pub mask: SpanMaskSpec,
    pub ema: EmaConfig,
    pub prototype_sizes: Vec<usize>,
    /// Projector output width; `model_dim` when absent.
    pub proj_dim: Option<usize>,
    pub temperature: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_epsilon: f64,
    pub alpha: f64,
    pub prototype_momentum: f64,
    pub freeze_prototypes_steps: u64,
    /// Feed `cosine / temperature` to Sinkhorn instead of raw cosine scores.
    pub teacher_logits_divide_by_temperature: bool,
}

impl Default for HubertppConfig {
    fn default() -> Self {
        HubertppConfig {
            mask: SpanMaskSpec::default(),
            ema: EmaConfig::default(),
            prototype_sizes: vec![128, 256],
            proj_dim: None,
            temperature: 0.1,
            sinkhorn_iters: 3,
            sinkhorn_epsilon: 0.05,
            alpha: 0.75,
            prototype_momentum: 0.9,
            freeze_prototypes_steps: 300,
            teacher_logits_divide_by_temperature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveConfig {
    Data2vec(Data2vecConfig),
    Dinosr(DinosrConfig),
    Jepa(JepaConfig),
    Cpc(CpcConfig),
    Hubertpp(HubertppConfig),
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::Cpc(CpcConfig::default())
    }
}

impl ObjectiveConfig {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            ObjectiveConfig::Data2vec(_) => ObjectiveKind::Data2vec,
            ObjectiveConfig::Dinosr(_) => ObjectiveKind::Dinosr,
            ObjectiveConfig::Jepa(_) => ObjectiveKind::Jepa,
            ObjectiveConfig::Cpc(_) => ObjectiveKind::Cpc,
            ObjectiveConfig::Hubertpp(_) => ObjectiveKind::Hubertpp,
        }
    }

    pub fn ema(&self) -> Option<&EmaConfig> {
        match self {
            ObjectiveConfig::Data2vec(c) => Some(&c.ema),
            ObjectiveConfig::Dinosr(c) => Some(&c.ema),
            ObjectiveConfig::Jepa(c) => Some(&c.ema),
            ObjectiveConfig::Cpc(_) => None,
            ObjectiveConfig::Hubertpp(c) => Some(&c.ema),
        }
    }

    pub fn ema_mut(&mut self) -> Option<&mut EmaConfig> {
        match self {
            ObjectiveConfig::Data2vec(c) => Some(&mut c.ema),
            ObjectiveConfig::Dinosr(c) => Some(&mut c.ema),
            ObjectiveConfig::Jepa(c) => Some(&mut c.ema),
            ObjectiveConfig::Cpc(_) => None,
            ObjectiveConfig::Hubertpp(c) => Some(&mut c.ema),
        }
    }

    /// Checks the objective's own parameters and its compatibility with the
    /// encoder (CPC needs a causal backbone, every other objective a
    /// non-causal one).
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        let causal = encoder.backbone.causal;
        match (self.kind(), causal) {
            (ObjectiveKind::Cpc, false) => {
                return Err(Error::Config("cpc requires backbone.causal = true".into()))
            }
            (k, true) if k != ObjectiveKind::Cpc => {
                return Err(Error::Config(format!("{} requires backbone.causal = false", k.as_str())))
            }
            _ => {}
        }
        if let Some(ema) = self.ema() {
            ema.validate()?;
        }
        let depth = encoder.backbone.depth();
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("objective.{name} must be positive, got {v}")))
            }
        };
        match self {
            ObjectiveConfig::Data2vec(c) => {
                if c.top_k_layers == 0 || c.top_k_layers > depth {
                    return Err(Error::Config(format!(
                        "objective.top_k_layers {} not in [1, {depth}]",
                        c.top_k_layers
                    )));
                }
                if c.beta < 0.0 {
                    return Err(Error::Config("objective.beta must be >= 0".into()));
                }
            }
            ObjectiveConfig::Dinosr(c) => {
                if c.codebook_sizes.is_empty() || c.codebook_sizes.len() > depth || c.codebook_sizes.contains(&0) {
                    return Err(Error::Config(format!(
                        "objective.codebook_sizes needs 1..={depth} positive sizes"
                    )));
                }
                positive("temperature", c.temperature)?;
                if !(0.0..=1.0).contains(&c.codebook_momentum) {
                    return Err(Error::Config("objective.codebook_momentum must lie in [0, 1]".into()));
                }
            }
            ObjectiveConfig::Jepa(c) => {
                if c.beta < 0.0 {
                    return Err(Error::Config("objective.beta must be >= 0".into()));
                }
            }
            ObjectiveConfig::Cpc(c) => {
                if c.num_steps == 0 {
                    return Err(Error::Config("objective.num_steps must be positive".into()));
                }
                positive("projection_init_scale", c.projection_init_scale)?;
            }
            ObjectiveConfig::Hubertpp(c) => {
                if c.prototype_sizes.is_empty() || c.prototype_sizes.contains(&0) {
                    return Err(Error::Config("objective.prototype_sizes needs positive sizes".into()));
                }
                positive("temperature", c.temperature)?;
                positive("sinkhorn_epsilon", c.sinkhorn_epsilon)?;
                if !(0.0..=1.0).contains(&c.alpha) || !(0.0..=1.0).contains(&c.prototype_momentum) {
                    return Err(Error::Config("objective.alpha and prototype_momentum must lie in [0, 1]".into()));
                }
                if c.proj_dim == Some(0) {
                    return Err(Error::Config("objective.proj_dim must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg: ObjectiveConfig = toml::from_str("kind = \"hubertpp\"\nalpha = 0.5\n").unwrap();
        match &cfg {
            ObjectiveConfig::Hubertpp(c) => {
                assert_eq!(c.alpha, 0.5);
                assert_eq!(c.prototype_sizes, vec![128, 256]);
            }
            other => panic!("{other:?}"),
        }
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ObjectiveConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<ObjectiveConfig>("kind = \"cpc\"\nnum_stpes = 3\n").is_err());
        assert!(toml::from_str::<ObjectiveConfig>("kind = \"simclr\"\n").is_err());
    }

    #[test]
    fn causality_compatibility() {
        let mut enc = EncoderConfig::default();
        assert!(ObjectiveKind::Cpc.default_config().validate(&enc).is_err());
        assert!(ObjectiveKind::Jepa.default_config().validate(&enc).is_ok());
        enc.backbone.causal = true;
        assert!(ObjectiveKind::Cpc.default_config().validate(&enc).is_ok());
        assert!(ObjectiveKind::Data2vec.default_config().validate(&enc).is_err());
    }
}
