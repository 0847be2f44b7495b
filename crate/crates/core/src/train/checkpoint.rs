//! Checkpoint directories: a TOML manifest plus one little-endian `f32`
//! blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, Trainer};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{Objective, ObjectiveConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
const BLOB_DIR: &str = "tensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step_count: u64,
    pub epochs_completed: u64,
    pub provenance: Vec<String>,
    pub counters: BTreeMap<String, u64>,
    /// Per-parameter Adam update counts.
    pub optimizer_steps: Vec<u64>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Group label reported in errors: the stem/backbone split for encoder
/// tensors, otherwise the top-level state family.
fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    match head {
        "student" | "teacher" | "student_buffer" | "teacher_buffer" => {
            format!("{head}.{}", parts.next().unwrap_or_default())
        }
        "optim_m" | "optim_v" => match parts.next() {
            Some("student") => format!("{head}.{}", parts.next().unwrap_or_default()),
            Some(other) => format!("{head}.{other}"),
            None => head.to_string(),
        },
        other => other.to_string(),
    }
}

/// All named tensors of a trainer, in a fixed order.
fn named_tensors(objective: &Objective, optimizer: &Adam) -> Vec<(String, Var)> {
    let mut out = objective.state_vars();
    let names = optimizer_names(objective);
    for (n, m) in names.iter().zip(&optimizer.m) {
        out.push((format!("optim_m.{n}"), m.clone()));
    }
    for (n, v) in names.iter().zip(&optimizer.v) {
        out.push((format!("optim_v.{n}"), v.clone()));
    }
    out
}

fn optimizer_names(objective: &Objective) -> Vec<String> {
    let student = objective.student.params.params.iter().map(|p| format!("student.{}", p.name));
    let head = objective.head_params.params.iter().map(|p| format!("head.{}", p.name));
    student.chain(head).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn tensor_bytes(var: &Var) -> Result<Vec<u8>> {
    let v = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

/// Writes `trainer` to `dir`. An existing checkpoint there is replaced; any
/// other non-empty directory is refused.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer) -> Result<()> {
    if dir.exists() {
        let is_ckpt = dir.join(MANIFEST_FILE).is_file();
        let empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_none();
        if !is_ckpt && !empty {
            return Err(Error::Checkpoint(format!(
                "{} exists and is not a checkpoint directory",
                dir.display()
            )));
        }
        if is_ckpt {
            let blobs = dir.join(BLOB_DIR);
            if blobs.exists() {
                fs::remove_dir_all(&blobs).map_err(io_err(&blobs))?;
            }
        }
    }
    let blobs = dir.join(BLOB_DIR);
    fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;

    let mut tensors = Vec::new();
    for (name, var) in named_tensors(&trainer.objective, &trainer.optimizer) {
        let file = format!("{BLOB_DIR}/{name}.f32");
        let path = dir.join(&file);
        fs::write(&path, tensor_bytes(&var)?).map_err(io_err(&path))?;
        tensors.push(TensorEntry {
            group: group_of(&name),
            shape: var.dims().to_vec(),
            name,
            file,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        step_count: trainer.objective.step_count,
        epochs_completed: trainer.epochs_completed,
        provenance: trainer.provenance.clone(),
        counters: trainer.objective.counters.clone(),
        optimizer_steps: trainer.optimizer.steps.clone(),
        train: trainer.config.clone(),
        encoder: trainer.objective.student.config.clone(),
        objective: trainer.objective.config.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("serializing manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    // check the version before the full schema so old formats fail clearly
    let raw: toml::Value =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    match raw.get("version").and_then(|v| v.as_integer()) {
        Some(v) if v == CHECKPOINT_VERSION as i64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "version mismatch: checkpoint has version {v}, this build reads version {CHECKPOINT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint(format!("{}: missing version field", path.display()))),
    }
    toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint using the configuration stored in it.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let manifest = read_manifest(dir)?;
    let (enc, obj) = (manifest.encoder.clone(), manifest.objective.clone());
    load_with(dir, manifest, &enc, &obj)
}

/// Loads a checkpoint into a model built from the given configuration; any
/// shape disagreement is reported for the first mismatching tensor.
pub fn load_checkpoint_into(dir: &Path, encoder: &EncoderConfig, objective: &ObjectiveConfig) -> Result<Trainer> {
    let manifest = read_manifest(dir)?;
    load_with(dir, manifest, encoder, objective)
}

fn load_with(dir: &Path, manifest: CheckpointManifest, encoder: &EncoderConfig, objective: &ObjectiveConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(objective, encoder, &manifest.train)?;
    let expected = named_tensors(&trainer.objective, &trainer.optimizer);
    let entries: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, var) in &expected {
        let entry = entries
            .get(name.as_str())
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name} (group {})", group_of(name))))?;
        if entry.shape != var.dims() {
            return Err(Error::Shape(format!(
                "first mismatched shape: tensor {name} is {:?} in the checkpoint but {:?} in the configured model",
                entry.shape,
                var.dims()
            )));
        }
    }
    if entries.len() != expected.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} tensors, configured model expects {}",
            entries.len(),
            expected.len()
        )));
    }
    for (name, var) in &expected {
        let entry = entries[name.as_str()];
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let want = var.elem_count() * 4;
        if bytes.len() != want {
            return Err(Error::Checkpoint(format!(
                "corrupted blob for tensor {name} in parameter group {}: {} bytes, expected {want}",
                entry.group,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(values, var.dims(), &Device::Cpu)?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    if manifest.optimizer_steps.len() != trainer.optimizer.steps.len() {
        return Err(Error::Shape("optimizer step counts do not match parameter count".into()));
    }
    trainer.optimizer.steps = manifest.optimizer_steps;
    trainer.objective.step_count = manifest.step_count;
    trainer.objective.counters = manifest.counters;
    trainer.epochs_completed = manifest.epochs_completed;
    trainer.provenance = manifest.provenance;
    Ok(trainer)
}
