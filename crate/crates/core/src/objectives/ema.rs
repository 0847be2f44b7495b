use candle_core::Var;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// EMA teacher momentum, constant or linearly ramped over `schedule_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub momentum: f64,
    pub end_momentum: Option<f64>,
    pub schedule_steps: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            momentum: 0.999,
            end_momentum: None,
            schedule_steps: 0,
        }
    }
}

impl EmaConfig {
    pub fn momentum_at(&self, step: u64) -> f64 {
        match self.end_momentum {
            Some(end) if self.schedule_steps > 0 => {
                let t = (step as f64 / self.schedule_steps as f64).min(1.0);
                self.momentum + t * (end - self.momentum)
            }
            _ => self.momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |m: f64| (0.0..=1.0).contains(&m);
        if !ok(self.momentum) || !self.end_momentum.map_or(true, ok) {
            return Err(Error::Config("EMA momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &[Var], student: &[Var], momentum: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "EMA teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "EMA shape mismatch: teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let next = ((t.as_tensor() * momentum)? + (s.as_tensor() * (1.0 - momentum))?)?;
        t.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    fn var(v: f64) -> Var {
        Var::from_tensor(&Tensor::new(&[v], &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn scalar_updates() {
        for (m, expect) in [(1.0, 1.0), (0.0, 0.0), (0.9, 0.9)] {
            let t = var(1.0);
            ema_update(&[t.clone()], &[var(0.0)], m).unwrap();
            assert_eq!(t.as_tensor().to_vec1::<f64>().unwrap()[0], expect);
        }
        assert!(ema_update(&[var(1.0)], &[], 0.5).is_err());
    }

    #[test]
    fn linear_schedule() {
        let c = EmaConfig {
            momentum: 0.999,
            end_momentum: Some(0.9999),
            schedule_steps: 100,
        };
        assert_eq!(c.momentum_at(0), 0.999);
        assert!((c.momentum_at(50) - 0.99945).abs() < 1e-12);
        assert_eq!(c.momentum_at(500), 0.9999);
        assert_eq!(EmaConfig::default().momentum_at(1000), 0.999);
    }
}
