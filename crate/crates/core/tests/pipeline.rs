//! Manifest on disk through pretraining, checkpointing, continual
//! pretraining and downstream adaptation.

use sigssl::data::{generate_synthetic, load_manifest, make_folds, SyntheticSpec, SyntheticTask, WindowSet};
use sigssl::encoder::{BackboneConfig, BackboneFamily, EncoderConfig, StemConfig};
use sigssl::eval::{adapt_checkpoint, read_report, AdaptMode, EvalConfig, TaskKind, TaskSpec};
use sigssl::objectives::{ObjectiveConfig, ObjectiveKind};
use sigssl::train::{continual_pretrain, load_checkpoint, pretrain, read_manifest, TrainConfig, STEP_CSV, VAL_CSV};
use sigssl::ErrorCategory;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        stem: StemConfig::with_dim(8),
        backbone: BackboneConfig {
            family: BackboneFamily::Ssm,
            depth: Some(1),
            model_dim: 8,
            state_dim: 4,
            causal: true,
            ..Default::default()
        },
    }
}

fn cpc() -> ObjectiveConfig {
    let mut cfg = ObjectiveKind::Cpc.default_config();
    if let ObjectiveConfig::Cpc(c) = &mut cfg {
        c.num_steps = 3;
    }
    cfg
}

fn split(set: &WindowSet, folds: &[usize], pick: impl Fn(usize) -> bool) -> WindowSet {
    set.filter_records(|r| pick(folds[r]))
}

#[test]
fn manifest_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_records: 24,
        channels: 3,
        length_samples: 128,
        seed: 11,
        task: SyntheticTask::BandPower,
        ..Default::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let manifest_path = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "tsv"))
        .unwrap();
    let manifest = load_manifest(&manifest_path).unwrap();
    let windows = WindowSet::from_manifest(&manifest, 64, 64).unwrap();
    assert_eq!(windows.len(), 48);

    let folds = make_folds(&manifest, 4, 0).unwrap();
    let fa = folds.fold_assignment.clone();
    let train = split(&windows, &fa, |f| f < 2);
    let val = split(&windows, &fa, |f| f == 2);
    let test = split(&windows, &fa, |f| f == 3);
    assert_eq!(train.len() + val.len() + test.len(), windows.len());

    let run = dir.path().join("run");
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let (trainer, record) = pretrain(&train, Some(&val), &cpc(), &tiny_encoder(), &cfg, Some(&run)).unwrap();
    assert!(record.step_losses.iter().all(|(_, l)| l.is_finite()));
    assert_eq!(record.val_losses.len(), 2);
    assert!(run.join(STEP_CSV).exists() && run.join(VAL_CSV).exists());

    let ckpt = run.join("checkpoint");
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.epochs_completed, trainer.epochs_completed);
    assert_eq!(loaded.validate(&val).unwrap(), trainer.validate(&val).unwrap());

    // continual pretraining keeps the history and rejects a different objective
    let cont = dir.path().join("cont");
    let one = TrainConfig { epochs: 1, ..cfg.clone() };
    continual_pretrain(&ckpt, Some(ObjectiveKind::Cpc), &test, None, &one, Some(&cont)).unwrap();
    let provenance = read_manifest(&cont.join("checkpoint")).unwrap().provenance;
    assert_eq!(provenance.len(), 2, "{provenance:?}");
    let err = continual_pretrain(&ckpt, Some(ObjectiveKind::Jepa), &test, None, &one, None).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Config);

    let task = TaskSpec::new(TaskKind::MultilabelClassification, train, Some(val), test.clone()).unwrap();
    let eval = EvalConfig {
        epochs: 2,
        batch_size: 16,
        attention_heads: 2,
        ..Default::default()
    };
    let (_, report) = adapt_checkpoint(&ckpt, &task, AdaptMode::Linear, &eval).unwrap();
    let out = dir.path().join("report");
    report.write(&out).unwrap();
    let (summary, preds, labels) = read_report(&out).unwrap();
    assert_eq!(summary.num_test, test.len());
    assert_eq!(preds.dim(), labels.dim());
    assert_eq!(summary.macro_score, report.scores.macro_score);
}
