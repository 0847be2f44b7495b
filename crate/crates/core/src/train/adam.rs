use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::Param;

/// Adam with L2 weight decay folded into the gradient (the classic, not
/// decoupled, form). Parameters flagged `decay = false` get no decay;
/// parameters without a gradient are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub params: Vec<Param>,
    /// Per-parameter learning-rate multipliers.
    pub lr_scale: Vec<f64>,
    pub m: Vec<Var>,
    pub v: Vec<Var>,
    /// Per-parameter update counts (bias correction).
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: Vec<Param>, lr: f64, weight_decay: f64) -> Result<Self> {
        let lr_scale = vec![1.0; params.len()];
        Self::with_scales(params, lr_scale, lr, weight_decay)
    }

    pub fn with_scales(params: Vec<Param>, lr_scale: Vec<f64>, lr: f64, weight_decay: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        if lr_scale.len() != params.len() {
            return Err(Error::Config("one learning-rate scale per parameter required".into()));
        }
        let zeros = |p: &Param| -> Result<Var> { Ok(Var::from_tensor(&p.var.as_tensor().zeros_like()?)?) };
        let m = params.iter().map(zeros).collect::<Result<Vec<_>>>()?;
        let v = params.iter().map(zeros).collect::<Result<Vec<_>>>()?;
        let steps = vec![0; params.len()];
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip: None,
            params,
            lr_scale,
            m,
            v,
            steps,
        })
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for p in &self.params {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let clip = match self.grad_clip {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for i in 0..self.params.len() {
            let p = &self.params[i];
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let mut g: Tensor = if clip != 1.0 { (g * clip)? } else { g.clone() };
            if p.decay && self.weight_decay != 0.0 {
                g = (g + (p.var.as_tensor() * self.weight_decay)?)?;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = ((self.m[i].as_tensor() * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((self.v[i].as_tensor() * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let lr = self.lr * self.lr_scale[i];
            p.var.set(&(p.var.as_tensor() - (update * lr)?)?)?;
            self.m[i].set(&m)?;
            self.v[i].set(&v)?;
        }
        Ok(())
    }
}
