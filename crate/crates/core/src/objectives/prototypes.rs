use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

fn normalize_rows(a: &mut Array2<f64>) {
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > NORM_EPS {
            r /= n;
        }
    }
}

/// Unit-norm cluster prototypes updated by EMA, never by gradients.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// `[K, dim]`, unit-norm rows.
    pub prototypes: Var,
    pub momentum: f64,
    pub freeze_steps: u64,
    pub temperature: f64,
}

impl PrototypeBank {
    pub fn new(size: usize, dim: usize, momentum: f64, freeze_steps: u64, temperature: f64, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array2::from_shape_fn((size, dim), |_| StandardNormal.sample(&mut rng));
        normalize_rows(&mut p);
        let t = Tensor::from_vec(p.into_raw_vec_and_offset().0, (size, dim), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(PrototypeBank {
            prototypes: Var::from_tensor(&t)?,
            momentum,
            freeze_steps,
            temperature,
        })
    }

    pub fn size(&self) -> usize {
        self.prototypes.dim(0).expect("2-d")
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let t = self.prototypes.as_tensor();
        let (k, d) = t.dims2()?;
        Ok(Array2::from_shape_vec((k, d), t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
            .map_err(|e| Error::Shape(e.to_string()))?)
    }

    /// `new = normalize(assignmentsᵀ · features)`, then
    /// `bank = normalize(m * bank + (1 - m) * new)`. No-op while
    /// `step_count < freeze_steps` or when `m = 1`. Returns whether an
    /// update happened.
    pub fn update(&self, features: &Array2<f64>, assignments: &Array2<f64>, step_count: u64) -> Result<bool> {
        if step_count < self.freeze_steps || self.momentum == 1.0 {
            return Ok(false);
        }
        let bank = self.to_array()?;
        if features.nrows() != assignments.nrows()
            || assignments.ncols() != bank.nrows()
            || features.ncols() != bank.ncols()
        {
            return Err(Error::Shape("prototype update shapes disagree".into()));
        }
        let mut new = assignments.t().dot(features);
        normalize_rows(&mut new);
        let m = self.momentum;
        let mut next = bank * m + new * (1.0 - m);
        normalize_rows(&mut next);
        let (k, d) = next.dim();
        let t = Tensor::from_vec(next.into_raw_vec_and_offset().0, (k, d), &Device::Cpu)?
            .to_dtype(self.prototypes.dtype())?;
        self.prototypes.set(&t)?;
        Ok(true)
    }
}
