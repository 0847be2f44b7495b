use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Online k-means codebook; not an optimizer parameter.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `[K, dim]`
    pub entries: Var,
    pub ema_momentum: f64,
    /// `[K]` cumulative assignment counts.
    pub usage_counts: Var,
}

impl Codebook {
    /// Standard-normal entries, matching the scale of layer-normalized features.
    pub fn new(size: usize, dim: usize, ema_momentum: f64, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..size * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let entries = Tensor::from_vec(v, (size, dim), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Codebook {
            entries: Var::from_tensor(&entries)?,
            ema_momentum,
            usage_counts: Var::from_tensor(&Tensor::zeros(size, dtype, &Device::Cpu)?)?,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.dim(0).expect("2-d")
    }

    /// Index of the nearest entry (squared Euclidean) for each row of `features: [n, dim]`.
    pub fn assign(&self, features: &Tensor) -> Result<Vec<u32>> {
        let e = self.entries.as_tensor();
        let f = features.detach().to_dtype(e.dtype())?;
        let e_sq = e.sqr()?.sum(D::Minus1)?;
        let d = f.matmul(&e.t()?)?.affine(-2.0, 0.0)?.broadcast_add(&e_sq)?;
        Ok(d.argmin(D::Minus1)?.to_vec1::<u32>()?)
    }

    /// Moves each entry with at least one assigned feature toward their mean:
    /// `entry <- m * entry + (1 - m) * mean`. Unused entries stay put.
    pub fn update(&self, features: &Tensor, assignments: &[u32]) -> Result<()> {
        let (n, dim) = features.dims2()?;
        if n != assignments.len() {
            return Err(Error::Shape(format!("{n} features but {} assignments", assignments.len())));
        }
        let k = self.size();
        let f = features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (row, &a) in f.iter().zip(assignments) {
            let a = a as usize;
            counts[a] += 1;
            sums[a].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        let dtype = self.entries.dtype();
        let mut entries = self.entries.as_tensor().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let m = self.ema_momentum;
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                entries[j]
                    .iter_mut()
                    .zip(&sums[j])
                    .for_each(|(e, s)| *e = m * *e + (1.0 - m) * (s / c));
            }
        }
        let flat: Vec<f64> = entries.into_iter().flatten().collect();
        self.entries
            .set(&Tensor::from_vec(flat, (k, dim), &Device::Cpu)?.to_dtype(dtype)?)?;
        let mut usage = self.usage_counts.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
        usage.iter_mut().zip(&counts).for_each(|(u, &c)| *u += c as f64);
        self.usage_counts
            .set(&Tensor::from_vec(usage, k, &Device::Cpu)?.to_dtype(dtype)?)?;
        Ok(())
    }
}
