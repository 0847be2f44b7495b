use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::*;
use crate::data::{synthetic_windows, SyntheticSpec};
use crate::encoder::{BackboneConfig, BackboneFamily, StemConfig};
use crate::error::ErrorCategory;

fn tiny_encoder(causal: bool) -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        stem: StemConfig::with_dim(8),
        backbone: BackboneConfig {
            family: BackboneFamily::Ssm,
            depth: Some(2),
            model_dim: 8,
            state_dim: 4,
            dropout: 0.1,
            causal,
            ..Default::default()
        },
    }
}

fn tiny_objective(kind: ObjectiveKind) -> ObjectiveConfig {
    let mut cfg = kind.default_config();
    match &mut cfg {
        ObjectiveConfig::Data2vec(c) => c.mask.span_len = 4,
        ObjectiveConfig::Dinosr(c) => {
            c.mask.span_len = 4;
            c.codebook_sizes = vec![6, 5];
        }
        ObjectiveConfig::Hubertpp(c) => {
            c.mask.span_len = 4;
            c.prototype_sizes = vec![4, 6];
        }
        ObjectiveConfig::Jepa(c) => c.mask.min_context_tokens = 4,
        ObjectiveConfig::Cpc(c) => c.num_steps = 3,
    }
    cfg
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        seed: 11,
        ..Default::default()
    }
}

fn windows(n: usize, seed: u64) -> WindowSet {
    let spec = SyntheticSpec {
        num_records: n,
        channels: 3,
        length_samples: 64,
        seed,
        ..Default::default()
    };
    synthetic_windows(&spec, 64).unwrap()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn cpc_requires_causal_backbone_before_any_step() {
    let err = pretrain(
        &windows(4, 0),
        None,
        &tiny_objective(ObjectiveKind::Cpc),
        &tiny_encoder(false),
        &tiny_config(1),
        None,
    )
    .unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Config);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.learning_rate, d.weight_decay, d.batch_size, d.epochs), (3e-3, 1e-3, 64, 10));
    assert!(toml::from_str::<TrainConfig>("learning_rat = 1.0").is_err());
}

#[test]
fn same_seed_gives_identical_loss_series() {
    let data = windows(16, 1);
    let run = || {
        pretrain(&data, None, &tiny_objective(ObjectiveKind::Data2vec), &tiny_encoder(false), &tiny_config(2), None)
            .unwrap()
            .1
    };
    let (a, b) = (run(), run());
    assert_eq!(a.step_losses.len(), 4);
    let bits = |r: &RunRecord| r.step_losses.iter().map(|(s, l)| (*s, l.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn validation_is_pure() {
    let data = windows(8, 2);
    let (trainer, _) = pretrain(
        &data,
        None,
        &tiny_objective(ObjectiveKind::Dinosr),
        &tiny_encoder(false),
        &tiny_config(1),
        None,
    )
    .unwrap();
    let before: Vec<Vec<f32>> = trainer
        .objective
        .state_vars()
        .iter()
        .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect();
    let a = trainer.validate(&data).unwrap();
    let b = trainer.validate(&data).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let after: Vec<Vec<f32>> = trainer
        .objective
        .state_vars()
        .iter()
        .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = windows(8, 3);
    let (trainer, record) = pretrain(
        &data,
        Some(&data),
        &tiny_objective(ObjectiveKind::Hubertpp),
        &tiny_encoder(false),
        &tiny_config(1),
        Some(tmp.path()),
    )
    .unwrap();
    assert_eq!(record.val_losses.len(), 1);
    assert!(tmp.path().join(STEP_CSV).is_file());
    let first = tmp.path().join("checkpoint");
    let loaded = load_checkpoint(&first).unwrap();
    assert_eq!(loaded.global_step(), trainer.global_step());
    let second = tmp.path().join("again");
    save_checkpoint(&second, &loaded).unwrap();
    assert_eq!(read_dir_bytes(&first), read_dir_bytes(&second));
    // saving over an existing checkpoint is allowed
    save_checkpoint(&second, &loaded).unwrap();
    assert_eq!(read_dir_bytes(&first), read_dir_bytes(&second));
}

fn saved_checkpoint(dir: &Path) -> Trainer {
    let trainer = Trainer::new(&tiny_objective(ObjectiveKind::Data2vec), &tiny_encoder(false), &tiny_config(1)).unwrap();
    save_checkpoint(dir, &trainer).unwrap();
    trainer
}

#[test]
fn truncated_blob_names_the_group() {
    let tmp = tempfile::tempdir().unwrap();
    saved_checkpoint(tmp.path());
    let m = read_manifest(tmp.path()).unwrap();
    let entry = m.tensors.iter().find(|e| e.name.starts_with("student.backbone")).unwrap();
    let path = tmp.path().join(&entry.file);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let msg = load_checkpoint(tmp.path()).unwrap_err().to_string();
    assert!(msg.contains("student.backbone"), "{msg}");
    assert!(msg.contains(&entry.name), "{msg}");
}

#[test]
fn mismatched_config_reports_first_shape() {
    let tmp = tempfile::tempdir().unwrap();
    saved_checkpoint(tmp.path());
    let mut other = tiny_encoder(false);
    other.in_channels = 4;
    let err = load_checkpoint_into(tmp.path(), &other, &tiny_objective(ObjectiveKind::Data2vec)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("first mismatched shape"), "{msg}");
    assert!(msg.contains("student.stem.0.conv.weight"), "{msg}");
}

#[test]
fn version_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    saved_checkpoint(tmp.path());
    let path = tmp.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap().replacen("version = 1", "version = 99", 1);
    fs::write(&path, text).unwrap();
    let msg = load_checkpoint(tmp.path()).unwrap_err().to_string();
    assert!(msg.contains("version mismatch"), "{msg}");
}

#[test]
fn refuses_to_overwrite_foreign_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("notes.txt"), "keep").unwrap();
    let trainer = Trainer::new(&tiny_objective(ObjectiveKind::Cpc), &tiny_encoder(true), &tiny_config(1)).unwrap();
    assert!(save_checkpoint(tmp.path(), &trainer).is_err());
}

#[test]
fn continual_zero_epochs_is_identity_and_tracks_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = windows(8, 4);
    let run1 = tmp.path().join("run1");
    let (first, _) = pretrain(
        &data,
        None,
        &tiny_objective(ObjectiveKind::Jepa),
        &tiny_encoder(false),
        &tiny_config(1),
        Some(&run1),
    )
    .unwrap();
    let run2 = tmp.path().join("run2");
    let (second, record) = continual_pretrain(
        &run1.join("checkpoint"),
        Some(ObjectiveKind::Jepa),
        &windows(8, 5),
        None,
        &tiny_config(0),
        Some(&run2),
    )
    .unwrap();
    assert!(record.step_losses.is_empty());
    assert_eq!(first.objective.student.params.snapshot().unwrap(), second.objective.student.params.snapshot().unwrap());
    let m = read_manifest(&run2.join("checkpoint")).unwrap();
    assert_eq!(m.provenance.len(), 2);
    assert!(m.provenance[0].starts_with("pretrain:jepa"));
    assert!(m.provenance[1].starts_with("continual:jepa"));

    let err = continual_pretrain(&run1.join("checkpoint"), Some(ObjectiveKind::Cpc), &data, None, &tiny_config(1), None)
        .unwrap_err();
    assert!(err.to_string().contains("objective kind mismatch"));
}

#[test]
fn continual_resumes_with_fresh_optimizer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = windows(8, 6);
    pretrain(&data, None, &tiny_objective(ObjectiveKind::Cpc), &tiny_encoder(true), &tiny_config(1), Some(tmp.path())).unwrap();
    let (t, record) = continual_pretrain(&tmp.path().join("checkpoint"), None, &data, None, &tiny_config(1), None).unwrap();
    assert_eq!(record.step_losses[0].0, 1);
    assert!(t.optimizer.steps.iter().all(|&s| s <= 1));
    assert_eq!(t.epochs_completed, 2);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut data = windows(8, 7);
    data.data[5] = f32::NAN;
    let err = pretrain(&data, None, &tiny_objective(ObjectiveKind::Dinosr), &tiny_encoder(false), &tiny_config(1), None)
        .unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Numerical);
    let msg = err.to_string();
    assert!(msg.contains("non-finite 1") && msg.contains("codebook 0 usage entropy"), "{msg}");
}

#[test]
fn max_steps_stops_early() {
    let cfg = TrainConfig { max_steps: Some(3), ..tiny_config(5) };
    let (_, r) = pretrain(&windows(16, 8), None, &tiny_objective(ObjectiveKind::Data2vec), &tiny_encoder(false), &cfg, None).unwrap();
    assert_eq!(r.step_losses.len(), 3);
}
