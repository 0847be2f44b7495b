use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{BackboneConfig, BackboneFamily, EncoderConfig, StemConfig};
use crate::nn::ops::{log_softmax_last, scalar};
use crate::nn::{check_gradients, Ctx, Mode};

fn tiny_encoder(causal: bool) -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        stem: StemConfig::with_dim(8),
        backbone: BackboneConfig {
            family: BackboneFamily::Ssm,
            depth: Some(2),
            model_dim: 8,
            state_dim: 4,
            dropout: 0.0,
            causal,
            ..Default::default()
        },
    }
}

fn tiny_config(kind: ObjectiveKind) -> ObjectiveConfig {
    let mut cfg = kind.default_config();
    match &mut cfg {
        ObjectiveConfig::Dinosr(c) => c.codebook_sizes = vec![6, 5],
        ObjectiveConfig::Jepa(c) => c.mask.min_context_tokens = 4,
        ObjectiveConfig::Hubertpp(c) => {
            c.prototype_sizes = vec![4, 6];
            c.freeze_prototypes_steps = 0;
        }
        _ => {}
    }
    cfg
}

fn span(p: f64) -> SpanMaskSpec {
    SpanMaskSpec { midpoint_prob: p, span_len: 4 }
}

fn with_dense_mask(mut cfg: ObjectiveConfig) -> ObjectiveConfig {
    match &mut cfg {
        ObjectiveConfig::Data2vec(c) => c.mask = span(0.2),
        ObjectiveConfig::Dinosr(c) => c.mask = span(0.2),
        ObjectiveConfig::Hubertpp(c) => c.mask = span(0.2),
        _ => {}
    }
    cfg
}

fn objective(kind: ObjectiveKind, dtype: DType) -> Objective {
    let cfg = with_dense_mask(tiny_config(kind));
    Objective::new(&cfg, &tiny_encoder(kind == ObjectiveKind::Cpc), 7, dtype).unwrap()
}

fn batch(b: usize, t: usize, seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * 3 * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (b, 3, t), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn data2vec_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = randn(&[2, 5, 3], &mut rng);
    let mask = Tensor::new(&[[1.0f64, 0.0, 1.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
    assert_eq!(scalar(&data2vec_loss(&target, &target, &mask, 1.0).unwrap()).unwrap(), 0.0);
    let shifted = (&target + 2.0).unwrap();
    let l = scalar(&data2vec_loss(&shifted, &target, &mask, 1.0).unwrap()).unwrap();
    assert!((l - 1.5).abs() < 1e-12);

    // scalar-loop oracle
    let pred = randn(&[2, 5, 3], &mut rng);
    let p = pred.to_vec3::<f64>().unwrap();
    let q = target.to_vec3::<f64>().unwrap();
    let m = mask.to_vec2::<f64>().unwrap();
    let (mut sum, mut count) = (0.0, 0.0);
    for b in 0..2 {
        for t in 0..5 {
            if m[b][t] == 1.0 {
                for d in 0..3 {
                    let a = (p[b][t][d] - q[b][t][d]).abs();
                    sum += if a < 1.0 { 0.5 * a * a } else { a - 0.5 };
                    count += 1.0;
                }
            }
        }
    }
    let l = scalar(&data2vec_loss(&pred, &target, &mask, 1.0).unwrap()).unwrap();
    assert!((l - sum / count).abs() < 1e-12);
}

#[test]
fn data2vec_targets_average_top_layers() {
    let a = Tensor::new(&[[[1.0f64, 3.0]]], &Device::Cpu).unwrap();
    let b = Tensor::new(&[[[3.0f64, 1.0]]], &Device::Cpu).unwrap();
    let c = Tensor::new(&[[[0.0f64, 4.0]]], &Device::Cpu).unwrap();
    // mean of the top two is [1.5, 2.5]; layer norm maps it to ~[-1, 1]
    let t = data2vec_targets(&[a, b, c], 2).unwrap().to_vec3::<f64>().unwrap();
    assert!((t[0][0][0] + 1.0).abs() < 1e-4 && (t[0][0][1] - 1.0).abs() < 1e-4);
}

#[test]
fn dinosr_loss_examples() {
    let mask = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
    let uniform = Tensor::zeros((1, 3, 256), DType::F64, &Device::Cpu).unwrap();
    let l = scalar(&dinosr_loss(&[uniform], &[vec![0, 17, 255]], &mask, 1.0).unwrap()).unwrap();
    assert!((l - 256f64.ln()).abs() < 1e-12);
    let mut v = vec![0f64; 3 * 4];
    for (i, j) in [2usize, 0, 3].iter().enumerate() {
        v[i * 4 + j] = 100.0;
    }
    let confident = Tensor::from_vec(v, (1, 3, 4), &Device::Cpu).unwrap();
    let l = scalar(&dinosr_loss(&[confident], &[vec![2, 0, 3]], &mask, 1.0).unwrap()).unwrap();
    assert!(l < 1e-40);
}

#[test]
fn jepa_loss_and_position_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = randn(&[1, 4, 2], &mut rng);
    let mask = Tensor::new(&[[1.0f64, 1.0, 0.0, 1.0]], &Device::Cpu).unwrap();
    let l = scalar(&jepa_loss(&(&target + 0.5).unwrap(), &target, &mask, 1.0).unwrap()).unwrap();
    assert!((l - 0.125).abs() < 1e-12);

    let obj = objective(ObjectiveKind::Jepa, DType::F32);
    let x = batch(3, 80, 1, DType::F32);
    let out = obj.forward(&x, &Ctx::target(), 99).unwrap();
    let spec = match &obj.config {
        ObjectiveConfig::Jepa(c) => c.mask,
        _ => unreachable!(),
    };
    let expected: usize = (0..3)
        .map(|i| {
            let m = sample_multiblock_mask(40, &spec, crate::seed::derive_seed(99, &[i])).unwrap();
            m.pred_blocks.iter().map(|b| b.len).sum::<usize>()
        })
        .sum();
    assert_eq!(out.positions, expected);
}

#[test]
fn cpc_loss_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, k, t, d) = (2, 3, 12, 16);
    // random unit-norm vectors scaled down: near-uniform scores
    let latents = (randn(&[b, t, d], &mut rng) * 0.01).unwrap();
    let preds = (randn(&[b, k, t, d], &mut rng) * 0.01).unwrap();
    let (l, valid) = cpc_loss(&preds, &latents).unwrap();
    assert_eq!(valid, (t - 1) + (t - 2) + (t - 3));
    assert!((scalar(&l).unwrap() / (t as f64).ln() - 1.0).abs() < 0.01);

    // orthogonal latents, predictions = scaled positives
    let eye: Vec<f64> = (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect();
    let latents = Tensor::from_vec(eye, (1, t, t), &Device::Cpu).unwrap();
    let lat = latents.to_vec3::<f64>().unwrap();
    let mut p = vec![0f64; k * t * t];
    for h in 1..=k {
        for a in 0..t - h {
            for j in 0..t {
                p[((h - 1) * t + a) * t + j] = 200.0 * lat[0][a + h][j];
            }
        }
    }
    let preds = Tensor::from_vec(p, (1, k, t, t), &Device::Cpu).unwrap();
    assert!(scalar(&cpc_loss(&preds, &latents).unwrap().0).unwrap() < 1e-30);
    assert!(cpc_loss(&preds.narrow(2, 0, 3).unwrap(), &latents.narrow(1, 0, 3).unwrap()).is_err());
}

#[test]
fn cpc_initial_loss_is_log_candidates() {
    let obj = objective(ObjectiveKind::Cpc, DType::F32);
    let x = batch(4, 120, 5, DType::F32);
    let l = scalar(&obj.forward(&x, &Ctx::target(), 0).unwrap().loss).unwrap();
    let ln_n = (CpcHead::num_candidates(60) as f64).ln();
    assert!((l / ln_n - 1.0).abs() < 0.05, "{l} vs {ln_n}");
}

#[test]
fn hubertpp_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = randn(&[5, 4], &mut rng);
    let p = log_softmax_last(&logits).unwrap().exp().unwrap().to_vec2::<f64>().unwrap();
    let q = Array2::from_shape_fn((5, 4), |(i, j)| p[i][j]);
    let mask = [true, false, true, true, false];
    let l = scalar(&hubertpp_loss(&[logits], &[q], &mask, 0.75).unwrap()).unwrap();
    assert!(l.abs() < 1e-12);
    let uniform = Tensor::zeros((5, 4), DType::F64, &Device::Cpu).unwrap();
    let q = Array2::from_elem((5, 4), 0.25);
    assert!(scalar(&hubertpp_loss(&[uniform.clone()], &[q.clone()], &mask, 0.75).unwrap()).unwrap().abs() < 1e-12);
    // all masked degenerates to the masked term alone
    assert!(hubertpp_loss(&[uniform], &[q], &[true; 5], 0.75).is_ok());
}

#[test]
fn hubertpp_prototypes_frozen_then_unit_norm() {
    let mut cfg = with_dense_mask(tiny_config(ObjectiveKind::Hubertpp));
    if let ObjectiveConfig::Hubertpp(c) = &mut cfg {
        c.freeze_prototypes_steps = 2;
    }
    let mut obj = Objective::new(&cfg, &tiny_encoder(false), 1, DType::F32).unwrap();
    let before: Vec<Vec<Vec<f32>>> = obj
        .prototype_banks()
        .iter()
        .map(|b| b.prototypes.as_tensor().to_vec2::<f32>().unwrap())
        .collect();
    let x = batch(2, 40, 3, DType::F32);
    for step in 0..4u64 {
        let out = obj.forward(&x, &Ctx::target(), step).unwrap();
        obj.apply_update(out.update).unwrap();
        let now: Vec<Vec<Vec<f32>>> = obj
            .prototype_banks()
            .iter()
            .map(|b| b.prototypes.as_tensor().to_vec2::<f32>().unwrap())
            .collect();
        if step < 2 {
            assert_eq!(now, before, "step {step}");
        } else {
            assert_ne!(now, before);
        }
        for bank in &now {
            for row in bank {
                let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }
}

fn sgd_step(obj: &Objective, x: &Tensor, seed: u64) -> PendingUpdate {
    let out = obj.forward(x, &Ctx::train(seed), seed).unwrap();
    let grads = out.loss.backward().unwrap();
    if let Some(t) = &obj.teacher {
        for p in &t.params.params {
            assert!(grads.get(p.var.as_tensor()).is_none(), "teacher {} got a gradient", p.name);
        }
    }
    for p in obj.trainable_params() {
        if let Some(g) = grads.get(p.var.as_tensor()) {
            p.var.set(&(p.var.as_tensor() - (g * 0.05).unwrap()).unwrap()).unwrap();
        }
    }
    out.update
}

#[test]
fn teacher_and_state_isolated_at_unit_momentum() {
    for kind in [ObjectiveKind::Data2vec, ObjectiveKind::Dinosr, ObjectiveKind::Jepa, ObjectiveKind::Hubertpp] {
        let mut cfg = with_dense_mask(tiny_config(kind));
        cfg.ema_mut().unwrap().momentum = 1.0;
        match &mut cfg {
            ObjectiveConfig::Dinosr(c) => c.codebook_momentum = 1.0,
            ObjectiveConfig::Hubertpp(c) => c.prototype_momentum = 1.0,
            _ => {}
        }
        let mut obj = Objective::new(&cfg, &tiny_encoder(false), 3, DType::F32).unwrap();
        let frozen = |o: &Objective| -> Vec<Vec<f64>> {
            o.state_vars()
                .into_iter()
                .filter(|(n, _)| !n.starts_with("student") && !n.starts_with("head") && !n.contains("usage"))
                .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap())
                .collect()
        };
        let before_frozen = frozen(&obj);
        let before_student = obj.student.params.snapshot().unwrap();
        let x = batch(2, 40, 4, DType::F32);
        let update = sgd_step(&obj, &x, 1);
        obj.apply_update(update).unwrap();
        let names: Vec<String> = obj.state_vars().into_iter().map(|(n, _)| n).filter(|n| !n.starts_with("student") && !n.starts_with("head") && !n.contains("usage")).collect();
        for ((a, b), n) in frozen(&obj).iter().zip(&before_frozen).zip(&names) {
            assert_eq!(a, b, "{kind:?} {n}");
        }
        assert_ne!(obj.student.params.snapshot().unwrap(), before_student, "{kind:?}");
    }
}

#[test]
fn validation_forward_is_pure() {
    for kind in ObjectiveKind::ALL {
        let obj = objective(kind, DType::F32);
        let x = batch(2, 40, 8, DType::F32);
        let snapshot = |o: &Objective| -> Vec<Vec<f32>> {
            o.state_vars()
                .into_iter()
                .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap())
                .collect()
        };
        let s0 = snapshot(&obj);
        let a = scalar(&obj.forward(&x, &Ctx::target(), 5).unwrap().loss).unwrap();
        let b = scalar(&obj.forward(&x, &Ctx::target(), 5).unwrap().loss).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{kind:?}");
        assert_eq!(snapshot(&obj), s0, "{kind:?}");
        assert!(a >= 0.0);
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    for kind in ObjectiveKind::ALL {
        let obj = objective(kind, DType::F64);
        let x = batch(2, 40, 9, DType::F64);
        let loss = || Ok(obj.forward(&x, &Ctx::new(Mode::Target, 0), 13)?.loss);
        let checks = check_gradients(&obj.trainable_params(), loss, 24, 1e-5, 21).unwrap();
        for c in checks {
            assert!(c.rel_err < 1e-3, "{kind:?} {c:?}");
        }
    }
}
