use candle_core::{DType, Device};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Bandwidth is `sigma` times the root of the median squared distance.
    MedianScaled,
    /// Bandwidth is `sigma` itself.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsicEstimator {
    Unbiased,
    Biased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaOptions {
    pub kernel: Kernel,
    pub sigma: f64,
    pub sigma_mode: SigmaMode,
    pub estimator: HsicEstimator,
    /// Z-normalize each feature before the kernel.
    pub standardize: bool,
}

impl Default for CkaOptions {
    fn default() -> Self {
        CkaOptions {
            kernel: Kernel::Rbf,
            sigma: 1.0,
            sigma_mode: SigmaMode::MedianScaled,
            estimator: HsicEstimator::Unbiased,
            standardize: true,
        }
    }
}

/// Pairwise layer similarities with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub labels: Vec<String>,
    pub values: Array2<f64>,
}

impl CkaMatrix {
    pub fn csv(&self) -> String {
        let mut s = String::from("layer");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(l);
            for v in self.values.row(i) {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Columns sorted by their contents, so feature order cannot change any
/// floating-point summation downstream.
fn canonical_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
    cols.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (n, d) = x.dim();
    Array2::from_shape_fn((n, d), |(i, j)| cols[j][i])
}

fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0);
    let mut out = x - &mean;
    for (mut col, &s) in out.columns_mut().into_iter().zip(std.iter()) {
        if s > 0.0 {
            col.mapv_inplace(|v| v / s);
        } else {
            col.fill(0.0);
        }
    }
    out
}

fn sq_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gram matrix of `x` under the configured kernel.
pub fn gram(x: &Array2<f64>, opts: &CkaOptions) -> Result<Array2<f64>> {
    // sort first: the canonical matrix is then bitwise independent of the
    // input column order, whatever the later arithmetic does
    let x = canonical_columns(x);
    let x = if opts.standardize { standardize(&x) } else { x };
    match opts.kernel {
        Kernel::Linear => Ok(x.dot(&x.t())),
        Kernel::Rbf => {
            if !(opts.sigma > 0.0) {
                return Err(Error::Config(format!("sigma must be > 0, got {}", opts.sigma)));
            }
            let d = sq_distances(&x);
            let bandwidth = match opts.sigma_mode {
                SigmaMode::Absolute => opts.sigma,
                SigmaMode::MedianScaled => {
                    let n = d.nrows();
                    let upper: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| d[[i, j]]).collect();
                    let m = median(upper);
                    if m > 0.0 { opts.sigma * m.sqrt() } else { opts.sigma }
                }
            };
            let g = 1.0 / (2.0 * bandwidth * bandwidth);
            Ok(d.mapv(|v| (-v * g).exp()))
        }
    }
}

/// HSIC between two Gram matrices; symmetric in its arguments bit for bit.
pub fn hsic(k: &Array2<f64>, l: &Array2<f64>, estimator: HsicEstimator) -> f64 {
    let n = k.nrows();
    match estimator {
        HsicEstimator::Unbiased if n >= 4 => {
            let nf = n as f64;
            let mut kt = k.clone();
            let mut lt = l.clone();
            kt.diag_mut().fill(0.0);
            lt.diag_mut().fill(0.0);
            let trace: f64 = kt.iter().zip(lt.iter()).map(|(a, b)| a * b).sum();
            let kr = kt.sum_axis(Axis(1));
            let lr = lt.sum_axis(Axis(1));
            let (ks, ls) = (kr.sum(), lr.sum());
            let cross: f64 = kr.iter().zip(lr.iter()).map(|(a, b)| a * b).sum();
            (trace + ks * ls / ((nf - 1.0) * (nf - 2.0)) - 2.0 * cross / (nf - 2.0)) / (nf * (nf - 3.0))
        }
        _ => {
            let kc = center(k);
            let lc = center(l);
            let trace: f64 = kc.iter().zip(lc.iter()).map(|(a, b)| a * b).sum();
            trace / ((n - 1) as f64).powi(2)
        }
    }
}

fn center(k: &Array2<f64>) -> Array2<f64> {
    let rows = k.mean_axis(Axis(1)).expect("non-empty");
    let cols = k.mean_axis(Axis(0)).expect("non-empty");
    let all = k.mean().expect("non-empty");
    let n = k.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| k[[i, j]] - rows[i] - cols[j] + all)
}

fn cka_from_grams(kx: &Array2<f64>, ky: &Array2<f64>, same: bool, opts: &CkaOptions) -> Result<f64> {
    let xy = hsic(kx, ky, opts.estimator);
    let xx = hsic(kx, kx, opts.estimator);
    let yy = hsic(ky, ky, opts.estimator);
    if !(xx > 0.0 && yy > 0.0) {
        if same {
            return Ok(1.0);
        }
        return Err(Error::Numerical(
            "CKA undefined: one representation has no variation across samples".into(),
        ));
    }
    Ok((xy / (xx * yy).sqrt()).clamp(0.0, 1.0))
}

/// CKA between `x: [N, D1]` and `y: [N, D2]` with centered kernel Gram
/// matrices; the result lies in `[0, 1]`.
pub fn rbf_cka(x: &Array2<f64>, y: &Array2<f64>, opts: &CkaOptions) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("CKA inputs have {} and {} samples", x.nrows(), y.nrows())));
    }
    if x.nrows() < 3 {
        return Err(Error::Data(format!("CKA needs at least 3 samples, got {}", x.nrows())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite activation in CKA input".into()));
    }
    cka_from_grams(&gram(x, opts)?, &gram(y, opts)?, x == y, opts)
}

/// CKA for every pair of layers; the upper triangle is computed once.
pub fn layer_cka_matrix(activations: &[(String, Array2<f64>)], opts: &CkaOptions) -> Result<CkaMatrix> {
    let n = activations.first().map_or(0, |(_, a)| a.nrows());
    for (name, a) in activations {
        if a.nrows() < 3 {
            return Err(Error::Data(format!("layer {name} has {} samples, need at least 3", a.nrows())));
        }
        if a.nrows() != n {
            return Err(Error::Shape(format!("layer {name} has {} samples, expected {n}", a.nrows())));
        }
    }
    let grams = activations.iter().map(|(_, a)| gram(a, opts)).collect::<Result<Vec<_>>>()?;
    let l = activations.len();
    let mut values = Array2::zeros((l, l));
    for i in 0..l {
        for j in i..l {
            let same = activations[i].1 == activations[j].1;
            let v = if i == j { 1.0 } else { cka_from_grams(&grams[i], &grams[j], same, opts)? };
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(CkaMatrix {
        labels: activations.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Early,
    Mid,
    Late,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Stage::Early),
            "mid" => Ok(Stage::Mid),
            "late" => Ok(Stage::Late),
            _ => Err(Error::Config(format!("unknown stage `{s}` (early|mid|late)"))),
        }
    }

    /// Index into [`layer_activations`] output: first stem layer, middle
    /// backbone layer or last backbone layer.
    pub fn layer_index(self, stem_layers: usize, backbone_layers: usize) -> usize {
        match self {
            Stage::Early => 0,
            Stage::Mid => stem_layers + backbone_layers.saturating_sub(1) / 2,
            Stage::Late => stem_layers + backbone_layers - 1,
        }
    }
}

/// Token-mean-pooled activations `[N, D_l]` of every stem and backbone layer
/// on `probe`, in evaluation mode. Labels are `stem.i` / `backbone.i`.
pub fn layer_activations(encoder: &Encoder, probe: &WindowSet, batch_size: usize) -> Result<Vec<(String, Array2<f64>)>> {
    if probe.is_empty() {
        return Err(Error::Data("empty probe set".into()));
    }
    let stem = encoder.config.stem.num_layers();
    let ctx = Ctx::eval();
    let idx: Vec<usize> = (0..probe.len()).collect();
    let mut per_layer: Vec<Vec<Array2<f64>>> = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = probe.batch(chunk, encoder.dtype, &Device::Cpu)?;
        let out = encoder.encode(&x, &ctx, true)?;
        let layers = out.per_layer.ok_or_else(|| Error::Shape("encoder returned no layer captures".into()))?;
        per_layer.resize_with(layers.len(), Vec::new);
        for (dst, t) in per_layer.iter_mut().zip(layers) {
            let pooled = t.mean(1)?.to_dtype(DType::F64)?;
            let (b, d) = pooled.dims2()?;
            let v = pooled.flatten_all()?.to_vec1::<f64>()?;
            dst.push(Array2::from_shape_vec((b, d), v).map_err(|e| Error::Shape(e.to_string()))?);
        }
    }
    per_layer
        .into_iter()
        .enumerate()
        .map(|(i, parts)| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let a = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let name = if i < stem { format!("stem.{i}") } else { format!("backbone.{}", i - stem) };
            Ok((name, a))
        })
        .collect()
}

/// CKA across models at one stage, on a shared probe set.
pub fn inter_model_cka(models: &[(String, &Encoder)], stage: Stage, probe: &WindowSet, opts: &CkaOptions) -> Result<CkaMatrix> {
    let mut acts = Vec::with_capacity(models.len());
    for (name, enc) in models {
        let layers = layer_activations(enc, probe, 64)?;
        let stem = enc.config.stem.num_layers();
        let i = stage.layer_index(stem, layers.len() - stem);
        acts.push((name.clone(), layers[i].1.clone()));
    }
    layer_cka_matrix(&acts, opts)
}
