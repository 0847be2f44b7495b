//! Post-hoc numerics: CKA, power-law fits, Spearman correlation, bootstrap
//! rankings, and CSV/SVG report emission.

mod cka;
pub mod plot;
mod powerlaw;
mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use cka::{
    gram, hsic, inter_model_cka, layer_activations, layer_cka_matrix, rbf_cka, CkaMatrix, CkaOptions, HsicEstimator,
    Kernel, SigmaMode, Stage,
};
pub use powerlaw::{fit_power_law, fit_power_law_with, fits_csv, weighted_alpha, FitModel, FitResult, Residuals, Weighting};
pub use stats::{bootstrap_rank, spearman, BootstrapConfig, RankTable, SpearmanResult, EXACT_P_MAX_N};

use crate::error::{Error, Result};

/// One analysis result to be written as a CSV table plus a plot.
#[derive(Debug, Clone)]
pub enum Product {
    /// Observed `(N, y)` with the fitted curve.
    Fit {
        name: String,
        points: Vec<(f64, f64)>,
        fit: FitResult,
        ylabel: String,
    },
    Cka {
        name: String,
        matrix: CkaMatrix,
    },
    /// Named `(num_train, error)` series.
    LabelEfficiency {
        name: String,
        series: Vec<(String, Vec<(f64, f64)>)>,
    },
    Correlation {
        name: String,
        labels: Vec<String>,
        x: Vec<f64>,
        y: Vec<f64>,
        result: SpearmanResult,
        xlabel: String,
        ylabel: String,
    },
    Rank {
        name: String,
        table: RankTable,
    },
}

impl Product {
    pub fn name(&self) -> &str {
        match self {
            Product::Fit { name, .. }
            | Product::Cka { name, .. }
            | Product::LabelEfficiency { name, .. }
            | Product::Correlation { name, .. }
            | Product::Rank { name, .. } => name,
        }
    }

    fn csv(&self) -> String {
        match self {
            Product::Fit { name, fit, .. } => fits_csv(&[(name.clone(), fit.clone())]),
            Product::Cka { matrix, .. } => matrix.csv(),
            Product::LabelEfficiency { series, .. } => {
                let mut s = String::from("series,num_train,error\n");
                for (label, pts) in series {
                    for (n, e) in pts {
                        s.push_str(&format!("{label},{n:?},{e:?}\n"));
                    }
                }
                s
            }
            Product::Correlation { labels, x, y, result, .. } => {
                let mut s = String::from("label,x,y\n");
                for ((l, a), b) in labels.iter().zip(x).zip(y) {
                    s.push_str(&format!("{l},{a:?},{b:?}\n"));
                }
                let exact = result.p_exact.map_or(String::new(), |p| format!("{p:?}"));
                s.push_str(&format!("# spearman r={:.3} p={:.3} p_exact={exact} n={}\n", result.r, result.p, result.n));
                s
            }
            Product::Rank { table, .. } => table.csv(),
        }
    }

    fn svg(&self) -> Option<String> {
        Some(match self {
            Product::Fit { name, points, fit, ylabel } => {
                let (lo, hi) = points
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
                let curve: Vec<(f64, f64)> = (0..=64)
                    .map(|i| {
                        let n = lo * (hi / lo).powf(i as f64 / 64.0);
                        (n, fit.predict(n))
                    })
                    .collect();
                let title = format!("{name}: C={:.4e} alpha={:.4} L0={:.4} R2={:.4}", fit.c, fit.alpha, fit.l0, fit.r_squared);
                plot::fit_plot(&title, points, &curve, "N", ylabel)
            }
            Product::Cka { name, matrix } => plot::heatmap(name, &matrix.labels, &matrix.values),
            Product::LabelEfficiency { name, series } => {
                let s: Vec<plot::Series> = series.iter().map(|(l, p)| plot::Series { label: l, points: p }).collect();
                plot::line_plot(name, &s, "training samples", "error", true)
            }
            Product::Correlation { name, labels, x, y, result, xlabel, ylabel } => {
                let pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
                let title = format!("{name}: r={:.3} p={:.3}", result.r, result.p);
                plot::scatter_plot(&title, &pts, labels, xlabel, ylabel)
            }
            Product::Rank { .. } => return None,
        })
    }
}

/// Writes `<name>.csv` and, where a chart applies, `<name>.svg` for every
/// product. Returns the written paths.
pub fn emit_report(products: &[Product], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for p in products {
        let name = p.name();
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid product name `{name}`")));
        }
        let csv = out_dir.join(format!("{name}.csv"));
        fs::write(&csv, p.csv()).map_err(|e| Error::io(&csv, e))?;
        written.push(csv);
        if let Some(svg) = p.svg() {
            let path = out_dir.join(format!("{name}.svg"));
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub const ACTIVATIONS_MANIFEST: &str = "activations.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationManifest {
    layers: Vec<ActivationEntry>,
}

/// Dumps layer activations as `.f32` blobs plus a shape manifest.
pub fn write_activations(dir: &Path, layers: &[(String, Array2<f64>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, (name, a)) in layers.iter().enumerate() {
        let file = format!("layer_{i:03}.f32");
        let bytes: Vec<u8> = a.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ActivationEntry {
            name: name.clone(),
            rows: a.nrows(),
            cols: a.ncols(),
            file,
        });
    }
    let text = toml::to_string(&ActivationManifest { layers: entries }).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join(ACTIVATIONS_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_activations(dir: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let path = dir.join(ACTIVATIONS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ActivationManifest = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    m.layers
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            if bytes.len() != e.rows * e.cols * 4 {
                return Err(Error::Data(format!(
                    "{}: {} bytes, expected {}x{} f32 values",
                    p.display(),
                    bytes.len(),
                    e.rows,
                    e.cols
                )));
            }
            let v: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok((e.name, Array2::from_shape_vec((e.rows, e.cols), v).map_err(|err| Error::Shape(err.to_string()))?))
        })
        .collect()
}
