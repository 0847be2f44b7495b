use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate groups: the stem, the sequential backbone and everything
/// attached on top (objective heads, probing heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Stem,
    Backbone,
    Head,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Stem => "stem",
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
    /// Whether weight decay applies (false for norm gains, biases, SSM dynamics).
    pub decay: bool,
}

/// Non-trainable state that still belongs to a module (batch-norm running
/// statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub var: Var,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn count_by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_insert(0) += p.var.elem_count();
        }
        out
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Copies every parameter and buffer value from `src`, which must have the
    /// same names and shapes in the same order.
    pub fn copy_from(&self, src: &ParamStore) -> Result<()> {
        if self.params.len() != src.params.len() || self.buffers.len() != src.buffers.len() {
            return Err(Error::Shape("parameter stores differ in size".into()));
        }
        for (d, s) in self.params.iter().zip(&src.params) {
            d.var.set(s.var.as_tensor())?;
        }
        for (d, s) in self.buffers.iter().zip(&src.buffers) {
            d.var.set(s.var.as_tensor())?;
        }
        Ok(())
    }

    /// Flat `f64` snapshot of all parameter values, for equality checks.
    pub fn snapshot(&self) -> Result<Vec<Vec<f64>>> {
        self.params
            .iter()
            .map(|p| Ok(p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
            .collect()
    }
}

/// Seeded parameter factory. Every layer constructor draws from the same
/// stream in construction order, so a seed fixes all initial values.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
    pub dtype: DType,
    pub device: Device,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup, dtype: DType) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
            group,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn group(&mut self, group: ParamGroup) -> Init<'_> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            group,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn tensor(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>, decay: bool) -> Result<Var> {
        let var = Var::from_tensor(&self.tensor(shape, values)?)?;
        self.store.params.push(Param {
            name: self.full_name(name),
            group: self.group,
            var: var.clone(),
            decay,
        });
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, decay: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.from_values(name, shape, values, decay)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.from_values(name, shape, values, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, decay: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![value; n], decay)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(shape, vec![value; n])?)?;
        self.store.buffers.push(Buffer {
            name: self.full_name(name),
            var: var.clone(),
        });
        Ok(var)
    }
}
