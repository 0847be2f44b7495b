use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::softmax_last;
use crate::nn::{Init, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Linear layer on mean-pooled tokens, trained with the encoder.
    LinearMeanpool,
    /// One learned query attending over all tokens, no bias terms.
    QueryAttention,
    /// Linear layer on mean-pooled tokens of a fixed encoder.
    LinearFrozen,
}

impl HeadVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::LinearMeanpool => "linear_meanpool",
            HeadVariant::QueryAttention => "query_attention",
            HeadVariant::LinearFrozen => "linear_frozen",
        }
    }

    /// Whether the head consumes the full token sequence.
    pub fn needs_tokens(self) -> bool {
        self == HeadVariant::QueryAttention
    }
}

/// Attentive pooling with a single learned query, followed by a linear
/// classifier. No projection carries a bias.
#[derive(Debug, Clone)]
pub struct QueryAttentionHead {
    pub query: Var,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub classifier: Linear,
    pub heads: usize,
}

impl QueryAttentionHead {
    pub fn new(init: &mut Init, dim: usize, heads: usize, num_targets: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("query attention: dim {dim} not divisible into {heads} heads")));
        }
        Ok(QueryAttentionHead {
            query: init.normal("query", &[dim], 1.0 / (dim as f64).sqrt(), true)?,
            key: Linear::new(&mut init.sub("key"), dim, dim, false)?,
            value: Linear::new(&mut init.sub("value"), dim, dim, false)?,
            out: Linear::new(&mut init.sub("out"), dim, dim, false)?,
            classifier: Linear::new(&mut init.sub("classifier"), dim, num_targets, false)?,
            heads,
        })
    }

    /// `[b, t, dim] -> [b, num_targets]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let (h, dh) = (self.heads, d / self.heads);
        let split = |y: Tensor| -> Result<Tensor> { Ok(y.reshape((b, t, h, dh))?.transpose(1, 2)?) };
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let q = self.query.as_tensor().reshape((1, h, 1, dh))?;
        let scores = (k.broadcast_mul(&q)?.sum(3)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let pooled = attn.unsqueeze(3)?.broadcast_mul(&v)?.sum(2)?.reshape((b, d))?;
        self.classifier.forward(&self.out.forward(&pooled)?)
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Linear(Linear),
    QueryAttention(QueryAttentionHead),
}

impl Head {
    pub fn new(init: &mut Init, variant: HeadVariant, dim: usize, heads: usize, num_targets: usize) -> Result<Self> {
        Ok(match variant {
            HeadVariant::QueryAttention => Head::QueryAttention(QueryAttentionHead::new(init, dim, heads, num_targets)?),
            _ => Head::Linear(Linear::new(&mut init.sub("linear"), dim, num_targets, true)?),
        })
    }

    /// Logits from tokens `[b, t, d]`, or from pooled features `[b, d]` for
    /// linear heads.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Head::Linear(l) if x.rank() == 3 => l.forward(&x.mean(1)?),
            Head::Linear(l) => l.forward(x),
            Head::QueryAttention(q) => q.forward(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, ParamGroup, ParamStore};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn query_attention_shape_no_bias_and_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = {
            let mut init = Init::new(&mut store, &mut rng, ParamGroup::Head, DType::F64);
            QueryAttentionHead::new(&mut init, 16, 16, 3).unwrap()
        };
        assert!(store.params.iter().all(|p| !p.name.ends_with("bias")));
        let x = Tensor::randn(0.0, 1.0, (2, 5, 16), &Device::Cpu).unwrap();
        assert_eq!(head.forward(&x).unwrap().dims(), &[2, 3]);
        let checks = check_gradients(&store.params, || Ok(head.forward(&x)?.sqr()?.sum_all()?), 20, 1e-6, 1).unwrap();
        for c in checks {
            assert!(c.rel_err < 1e-3, "{c:?}");
        }
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Head, DType::F64);
        assert!(QueryAttentionHead::new(&mut init, 12, 16, 1).is_err());
    }

    #[test]
    fn attention_pooling_is_permutation_invariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Head, DType::F64);
        let head = QueryAttentionHead::new(&mut init, 8, 4, 2).unwrap();
        let x = Tensor::randn(0.0, 1.0, (1, 6, 8), &Device::Cpu).unwrap();
        let idx = Tensor::new(&[5u32, 3, 1, 0, 2, 4], &Device::Cpu).unwrap();
        let y = head.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let z = head.forward(&x.index_select(&idx, 1).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in y[0].iter().zip(&z[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
