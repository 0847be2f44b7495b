use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sigssl::analysis::{
    emit_report, fit_power_law, layer_activations, layer_cka_matrix, read_activations, spearman, weighted_alpha,
    write_activations, bootstrap_rank, FitResult, Product, Stage, ACTIVATIONS_MANIFEST,
};
use sigssl::data::{generate_synthetic, load_manifest, make_folds, DatasetManifest, FoldSplit, SyntheticSpec, WindowSet};
use sigssl::encoder::Encoder;
use sigssl::eval::{adapt, label_efficiency, read_report, AdaptMode, TaskSpec};
use sigssl::train::{self, continual_pretrain, load_checkpoint, read_manifest, CONFIG_ECHO, MANIFEST_FILE};
use sigssl::{Error, Result};

use crate::config::RunConfig;

fn io<P: AsRef<Path>>(path: P) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.as_ref().to_path_buf();
    move |source| Error::Io { path, source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml()?)
}

/// Accepts either a checkpoint directory or a run directory holding one.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if !path.join(MANIFEST_FILE).exists() && nested.join(MANIFEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    Ok(load_checkpoint(&resolve_checkpoint(path))?.objective.student)
}

fn check_channels(manifest: &DatasetManifest, cfg_channels: usize, what: &str) -> Result<()> {
    match manifest.num_channels() {
        Some(c) if c != cfg_channels => Err(Error::Config(format!(
            "{what} has {c} channels but the encoder expects {cfg_channels}"
        ))),
        _ => Ok(()),
    }
}

fn folds(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<FoldSplit> {
    let split = make_folds(manifest, cfg.data.num_folds, cfg.data.fold_seed)?;
    match cfg.data.val_fold {
        Some(f) => split.with_val_fold(f),
        None => Ok(split),
    }
}

/// Pretraining windows split into train and an optional validation fold.
fn ssl_windows(cfg: &RunConfig, data: &Path, channels: usize) -> Result<(WindowSet, Option<WindowSet>)> {
    let manifest = load_manifest(data)?;
    check_channels(&manifest, channels, "data manifest")?;
    let all = WindowSet::from_manifest(&manifest, cfg.data.window_len, cfg.data.stride())?;
    if all.is_empty() {
        return Err(Error::Data(format!(
            "{} yields no windows of {} samples",
            data.display(),
            cfg.data.window_len
        )));
    }
    if !cfg.data.validation {
        return Ok((all, None));
    }
    let split = folds(cfg, &manifest)?;
    let train = all.filter_records(|r| !split.is_val(r));
    let val = all.filter_records(|r| split.is_val(r));
    Ok((train, Some(val)))
}

pub fn synth_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(io(spec_path))?;
    let spec: SyntheticSpec = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", spec_path.display(), e.message())))?;
    let manifest = generate_synthetic(&spec, out)?;
    let echo = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join(CONFIG_ECHO), &echo)?;
    log::info!("wrote {} records to {}", manifest.len(), out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (train, val) = ssl_windows(cfg, data, cfg.encoder.in_channels)?;
    create_dir(out)?;
    train::pretrain(&train, val.as_ref(), &cfg.objective, &cfg.encoder, &cfg.train, Some(out))?;
    echo_config(cfg, out)
}

/// Without `--config`, the checkpoint's own training settings are reused
/// and the objective kind is not checked.
pub fn continual(config: Option<&Path>, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = resolve_checkpoint(checkpoint);
    let manifest = read_manifest(&ckpt)?;
    let (cfg, expected) = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let kind = cfg.objective.kind();
            (cfg, Some(kind))
        }
        None => (
            RunConfig {
                encoder: manifest.encoder.clone(),
                objective: manifest.objective.clone(),
                train: manifest.train.clone(),
                ..RunConfig::default()
            },
            None,
        ),
    };
    let (train, val) = ssl_windows(&cfg, data, manifest.encoder.in_channels)?;
    create_dir(out)?;
    continual_pretrain(&ckpt, expected, &train, val.as_ref(), &cfg.train, Some(out))?;
    // the checkpoint defines the model, whatever the config said
    let echoed = RunConfig {
        encoder: manifest.encoder,
        objective: manifest.objective,
        ..cfg
    };
    echo_config(&echoed, out)
}

/// Test fold is the configured validation fold; the fold before it is used
/// for validation during adaptation.
fn task_spec(cfg: &RunConfig, task: &Path, channels: usize) -> Result<TaskSpec> {
    let manifest = load_manifest(task)?;
    check_channels(&manifest, channels, "task manifest")?;
    if manifest.num_targets().is_none() {
        return Err(Error::Data(format!("{} has no labels", task.display())));
    }
    let all = WindowSet::from_manifest(&manifest, cfg.data.window_len, cfg.data.stride())?;
    let split = folds(cfg, &manifest)?;
    let test_fold = split.val_fold;
    let val_fold = (test_fold + split.num_folds - 1) % split.num_folds;
    let fold = |r: usize| split.fold_assignment[r];
    let train = all.filter_records(|r| fold(r) != test_fold && fold(r) != val_fold);
    let val = all.filter_records(|r| fold(r) == val_fold);
    let test = all.filter_records(|r| fold(r) == test_fold);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!("{}: a fold split left no train or test windows", task.display())));
    }
    TaskSpec::new(cfg.data.task, train, (!val.is_empty()).then_some(val), test)
}

fn mode_or_default(cfg: &RunConfig, mode: Option<&str>) -> Result<AdaptMode> {
    mode.map_or(Ok(cfg.eval.mode), AdaptMode::parse)
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, task: &Path, mode: Option<&str>, out: &Path) -> Result<()> {
    let mode = mode_or_default(cfg, mode)?;
    let encoder = load_encoder(checkpoint)?;
    let spec = task_spec(cfg, task, encoder.config.in_channels)?;
    let (_, report) = adapt(&encoder, &spec, mode, &cfg.eval)?;
    report.write(out)?;
    echo_config(cfg, out)
}

pub const LABEL_EFFICIENCY_CSV: &str = "label_efficiency.csv";

pub fn label_eff(
    cfg: &RunConfig,
    checkpoint: &Path,
    task: &Path,
    mode: Option<&str>,
    fractions: Option<Vec<f64>>,
    out: &Path,
) -> Result<()> {
    let mode = mode_or_default(cfg, mode)?;
    let mut cfg = cfg.clone();
    if let Some(f) = fractions {
        cfg.eval.fractions = f;
    }
    let encoder = load_encoder(checkpoint)?;
    let spec = task_spec(&cfg, task, encoder.config.in_channels)?;
    let table = label_efficiency(&encoder, &spec, &cfg.eval.fractions, mode, &cfg.eval, cfg.eval.seed)?;
    create_dir(out)?;
    write(&out.join(LABEL_EFFICIENCY_CSV), &table.csv())?;
    for (i, row) in table.rows.iter().enumerate() {
        row.report.write(&out.join(format!("fraction_{i:02}")))?;
    }
    echo_config(&cfg, out)
}

/// Display name for an input path: the directory or file stem, skipping a
/// trailing `checkpoint` component.
fn input_name(path: &Path) -> String {
    let mut p = path;
    if p.file_name().is_some_and(|n| n == "checkpoint") {
        if let Some(parent) = p.parent().filter(|q| q.file_name().is_some()) {
            p = parent;
        }
    }
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn unique_names(paths: &[PathBuf]) -> Vec<String> {
    let raw: Vec<String> = paths.iter().map(|p| input_name(p)).collect();
    raw.iter()
        .enumerate()
        .map(|(i, n)| {
            if raw.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}_{i}")
            } else {
                n.clone()
            }
        })
        .collect()
}

fn input_layers(cfg: &RunConfig, input: &Path, probe: Option<&WindowSet>) -> Result<Vec<(String, Array2<f64>)>> {
    if input.join(ACTIVATIONS_MANIFEST).exists() {
        return read_activations(input);
    }
    let probe = probe.ok_or_else(|| {
        Error::Config(format!(
            "{} is not an activation dump; pass --probe to compute activations from a checkpoint",
            input.display()
        ))
    })?;
    let encoder = load_encoder(input)?;
    layer_activations(&encoder, probe, cfg.analysis.batch_size)
}

fn stage_layer(layers: &[(String, Array2<f64>)], stage: Stage) -> Result<(String, Array2<f64>)> {
    let stem = layers.iter().filter(|(n, _)| n.starts_with("stem.")).count();
    let backbone = layers.iter().filter(|(n, _)| n.starts_with("backbone.")).count();
    if stem + backbone != layers.len() || backbone == 0 {
        return Err(Error::Data("activation dump lacks stem./backbone. layer names".into()));
    }
    Ok(layers[stage.layer_index(stem, backbone)].clone())
}

pub fn analyze_cka(cfg: &RunConfig, inputs: &[PathBuf], probe: Option<&Path>, stage: Option<&str>, out: &Path) -> Result<()> {
    let probe = match probe {
        Some(p) => {
            let manifest = load_manifest(p)?;
            let all = WindowSet::from_manifest(&manifest, cfg.data.window_len, cfg.data.stride())?;
            let n = all.len().min(cfg.analysis.probe_samples);
            Some(all.subset(&(0..n).collect::<Vec<_>>()))
        }
        None => None,
    };
    let names = unique_names(inputs);
    let mut products = Vec::new();
    if inputs.len() == 1 {
        let layers = input_layers(cfg, &inputs[0], probe.as_ref())?;
        if !inputs[0].join(ACTIVATIONS_MANIFEST).exists() {
            write_activations(&out.join("activations"), &layers)?;
        }
        let matrix = layer_cka_matrix(&layers, &cfg.analysis.cka)?;
        products.push(Product::Cka {
            name: format!("cka_layers_{}", names[0]),
            matrix,
        });
    } else {
        let stage = stage.map_or(Ok(cfg.analysis.stage), Stage::parse)?;
        let mut picked = Vec::with_capacity(inputs.len());
        for (input, name) in inputs.iter().zip(&names) {
            let layers = input_layers(cfg, input, probe.as_ref())?;
            let (_, a) = stage_layer(&layers, stage)?;
            picked.push((name.clone(), a));
        }
        let matrix = layer_cka_matrix(&picked, &cfg.analysis.cka)?;
        products.push(Product::Cka {
            name: format!("cka_models_{}", stage_name(stage)),
            matrix,
        });
    }
    emit_report(&products, out)?;
    echo_config(cfg, out)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Early => "early",
        Stage::Mid => "mid",
        Stage::Late => "late",
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect())
}

fn parse_num(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("{} line {line}: `{field}` is not a number", path.display())))
}

/// Rows after an optional header, which is recognised by a non-numeric
/// field where a number is expected.
fn data_rows(path: &Path, numeric_col: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let rows = read_csv_rows(path)?;
    let skip = rows
        .first()
        .is_some_and(|r| r.get(numeric_col).is_some_and(|f| f.parse::<f64>().is_err()));
    Ok(rows.into_iter().enumerate().skip(usize::from(skip)).map(|(i, r)| (i + 1, r)).collect())
}

/// `n,value` rows form one series named after the file; `series,n,value`
/// rows are grouped by their first column.
fn read_series(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let rows = data_rows(path, 1)?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (line, r) in rows {
        let (name, n, y) = match r.as_slice() {
            [n, y] => (input_name(path), n, y),
            [s, n, y] => (s.clone(), n, y),
            _ => {
                return Err(Error::Data(format!(
                    "{} line {line}: expected `n,value` or `series,n,value`",
                    path.display()
                )))
            }
        };
        let point = (parse_num(path, line, n)?, parse_num(path, line, y)?);
        match series.iter_mut().find(|(s, _)| *s == name) {
            Some((_, pts)) => pts.push(point),
            None => series.push((name, vec![point])),
        }
    }
    if series.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Ok(series)
}

fn fit_product(name: &str, points: Vec<(f64, f64)>, with_floor: bool, ylabel: &str) -> Result<(Product, FitResult)> {
    let (n, y): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let fit = fit_power_law(&n, &y, with_floor)?;
    Ok((
        Product::Fit {
            name: name.to_string(),
            points,
            fit: fit.clone(),
            ylabel: ylabel.to_string(),
        },
        fit,
    ))
}

pub const FITS_CSV: &str = "fits.csv";
pub const WEIGHTED_ALPHA_FILE: &str = "weighted_alpha.txt";

fn write_fits(out: &Path, fits: &[(String, FitResult)], cfg: &RunConfig) -> Result<()> {
    create_dir(out)?;
    write(&out.join(FITS_CSV), &sigssl::analysis::fits_csv(fits))?;
    if fits.len() > 1 {
        let results: Vec<FitResult> = fits.iter().map(|(_, f)| f.clone()).collect();
        let alpha = weighted_alpha(&results, cfg.analysis.weighting)?;
        write(&out.join(WEIGHTED_ALPHA_FILE), &format!("{alpha:?}\n"))?;
    }
    Ok(())
}

pub fn analyze_scaling(cfg: &RunConfig, inputs: &[PathBuf], floor: bool, out: &Path) -> Result<()> {
    let with_floor = floor || cfg.analysis.with_floor;
    let mut products = Vec::new();
    let mut fits = Vec::new();
    for input in inputs {
        for (name, points) in read_series(input)? {
            let (product, fit) = fit_product(&format!("fit_{name}"), points, with_floor, "loss")?;
            products.push(product);
            fits.push((name, fit));
        }
    }
    emit_report(&products, out)?;
    write_fits(out, &fits, cfg)?;
    echo_config(cfg, out)
}

pub fn analyze_label_efficiency(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let names = unique_names(&inputs.iter().map(|p| label_eff_dir(p)).collect::<Vec<_>>());
    let mut series = Vec::new();
    let mut products = Vec::new();
    let mut fits = Vec::new();
    for (input, name) in inputs.iter().zip(names) {
        let path = if input.is_dir() { input.join(LABEL_EFFICIENCY_CSV) } else { input.clone() };
        let mut points = Vec::new();
        for (line, r) in data_rows(&path, 1)? {
            // fraction,num_train,macro,error
            if r.len() != 4 {
                return Err(Error::Data(format!(
                    "{} line {line}: expected fraction,num_train,macro,error",
                    path.display()
                )));
            }
            points.push((parse_num(&path, line, &r[1])?, parse_num(&path, line, &r[3])?));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (product, fit) = fit_product(&format!("fit_{name}"), points.clone(), true, "residual error")?;
        products.push(product);
        fits.push((name.clone(), fit));
        series.push((name, points));
    }
    products.push(Product::LabelEfficiency {
        name: "label_efficiency".into(),
        series,
    });
    emit_report(&products, out)?;
    write_fits(out, &fits, cfg)?;
    echo_config(cfg, out)
}

/// Names label-efficiency inputs after their run directory.
fn label_eff_dir(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().filter(|q| q.file_name().is_some()).unwrap_or(p).to_path_buf()
    }
}

pub fn analyze_rank(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let names = unique_names(inputs);
    let mut models = Vec::with_capacity(inputs.len());
    let mut reference: Option<(Array2<f64>, sigssl::eval::TaskKind)> = None;
    for (input, name) in inputs.iter().zip(names) {
        let (summary, preds, labels) = read_report(input)?;
        let labels = labels.mapv(f64::from);
        match &reference {
            None => reference = Some((labels, summary.task)),
            Some((l, kind)) => {
                if *l != labels || *kind != summary.task {
                    return Err(Error::Data(format!(
                        "{} was evaluated on a different test set or task",
                        input.display()
                    )));
                }
            }
        }
        models.push((name, preds.mapv(f64::from)));
    }
    let (labels, task) = reference.expect("at least one input");
    let table = bootstrap_rank(&models, &labels, task, &cfg.analysis.bootstrap)?;
    emit_report(&[Product::Rank { name: "rank".into(), table }], out)?;
    echo_config(cfg, out)
}

pub fn analyze_spearman(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let rows = read_csv_rows(input)?;
    let header = rows
        .first()
        .filter(|r| r.len() == 3 && r[1].parse::<f64>().is_err())
        .cloned();
    let (xlabel, ylabel) = header.map_or(("x".to_string(), "y".to_string()), |h| (h[1].clone(), h[2].clone()));
    let (mut labels, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (line, r) in data_rows(input, 1)? {
        if r.len() != 3 {
            return Err(Error::Data(format!("{} line {line}: expected label,x,y", input.display())));
        }
        labels.push(r[0].clone());
        x.push(parse_num(input, line, &r[1])?);
        y.push(parse_num(input, line, &r[2])?);
    }
    let result = spearman(&x, &y)?;
    let product = Product::Correlation {
        name: "spearman".into(),
        labels,
        x,
        y,
        result,
        xlabel,
        ylabel,
    };
    emit_report(&[product], out)?;
    echo_config(cfg, out)
}
