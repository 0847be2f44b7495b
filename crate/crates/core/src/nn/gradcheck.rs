//! Central finite-difference gradient checks against autodiff.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::scalar;
use super::params::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor of 1e-4 on the denominator. An
/// exactly-zero gradient (a bias feeding batch norm) then compares equal to
/// the ~1e-9 rounding noise of the central difference, while any absolute
/// disagreement above 1e-7 still exceeds a 1e-3 tolerance.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn set_element(param: &Param, index: usize, value: f64) -> Result<()> {
    let t = param.var.as_tensor();
    let mut flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    flat[index] = value;
    let new = Tensor::from_vec(flat, t.shape(), t.device())?.to_dtype(t.dtype())?;
    param.var.set(&new)?;
    Ok(())
}

/// Compares autodiff gradients of `loss` with central differences on
/// `samples` randomly chosen parameter elements. `loss` must be a
/// deterministic function of the parameters.
pub fn check_gradients<F>(params: &[Param], mut loss: F, samples: usize, step: f64, seed: u64) -> Result<Vec<GradCheck>>
where
    F: FnMut() -> Result<Tensor>,
{
    if params.is_empty() {
        return Err(Error::Config("no parameters to check".into()));
    }
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let p = &params[rng.gen_range(0..params.len())];
        let index = rng.gen_range(0..p.var.elem_count());
        let analytic = match grads.get(p.var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let orig = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index];
        set_element(p, index, orig + step)?;
        let plus = scalar(&loss()?)?;
        set_element(p, index, orig - step)?;
        let minus = scalar(&loss()?)?;
        set_element(p, index, orig)?;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(GradCheck {
            name: p.name.clone(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}
