use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::eval::{macro_auroc, average_ranks, TaskKind};
use crate::seed::derive_seed;

/// Largest n for which the exact permutation p-value is enumerated.
pub const EXACT_P_MAX_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub r: f64,
    /// Two-sided p-value from the t-approximation.
    pub p: f64,
    /// One-sided exact permutation p-value (probability of a correlation at
    /// least as extreme in the observed direction), for n <= 8.
    pub p_exact: Option<f64>,
    pub n: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let mut out = vec![p.clone()];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            out.push(p.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Shape(format!("spearman: {n} vs {} values", y.len())));
    }
    if n < 3 {
        return Err(Error::Data(format!("spearman needs at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("spearman: non-finite value".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if rx.iter().all(|&v| v == rx[0]) || ry.iter().all(|&v| v == ry[0]) {
        return Err(Error::Data("spearman: constant series".into()));
    }
    let r = pearson(&rx, &ry);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };
    let p_exact = (n <= EXACT_P_MAX_N).then(|| {
        let perms = permutations(n);
        let tol = 1e-12;
        let hits = perms
            .iter()
            .filter(|perm| {
                let permuted: Vec<f64> = perm.iter().map(|&i| ry[i]).collect();
                let rp = pearson(&rx, &permuted);
                if r >= 0.0 { rp >= r - tol } else { rp <= r + tol }
            })
            .count();
        hits as f64 / perms.len() as f64
    });
    Ok(SpearmanResult { r, p, p_exact, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

/// Ranks of models on one task with their equivalence groups.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub models: Vec<String>,
    /// Point estimate per model (AUROC, or standardized MAE for regression).
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
    /// Model indices per group, best group first.
    pub groups: Vec<Vec<usize>>,
    pub config: BootstrapConfig,
}

impl RankTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("model,score,rank,group\n");
        for (i, m) in self.models.iter().enumerate() {
            let g = self.groups.iter().position(|g| g.contains(&i)).unwrap_or(0);
            let _ = writeln!(s, "{m},{:?},{},{}", self.scores[i], self.ranks[i], g + 1);
        }
        s
    }
}

/// Higher-is-better score of predictions on the rows `idx`; `None` when no
/// target is scorable on that resample.
fn score_rows(preds: &Array2<f64>, labels: &Array2<f64>, idx: Option<&[usize]>, task: TaskKind) -> Result<Option<f64>> {
    let (p, l) = match idx {
        Some(i) => (preds.select(Axis(0), i), labels.select(Axis(0), i)),
        None => (preds.clone(), labels.clone()),
    };
    match task {
        TaskKind::MultilabelClassification => Ok(macro_auroc(&p, &l)?.macro_score),
        TaskKind::Regression => {
            // negated MAE in raw units; z-scaling is a per-target constant
            // that is shared by every model
            let mae: Array1<f64> = (&p - &l).mapv(f64::abs).mean_axis(Axis(0)).expect("rows");
            Ok(Some(-mae.mean().expect("targets")))
        }
    }
}

/// Percentile interval of `best - other` over paired bootstrap resamples.
fn difference_interval(
    best: &Array2<f64>,
    other: &Array2<f64>,
    labels: &Array2<f64>,
    task: TaskKind,
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = labels.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(cfg.resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..cfg.resamples {
        for v in idx.iter_mut() {
            *v = rng.gen_range(0..n);
        }
        if let (Some(a), Some(b)) = (score_rows(best, labels, Some(&idx), task)?, score_rows(other, labels, Some(&idx), task)?) {
            diffs.push(a - b);
        }
    }
    if diffs.is_empty() {
        return Err(Error::Data("no bootstrap resample had a scorable target".into()));
    }
    diffs.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (diffs.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        diffs[lo] + (diffs[hi] - diffs[lo]) * (pos - lo as f64)
    };
    let tail = (1.0 - cfg.confidence) / 2.0;
    Ok((q(tail), q(1.0 - tail)))
}

/// Ranks models by paired bootstrap tests against the best remaining model.
/// Models whose difference interval to that model contains zero share its
/// rank; a group's rank is one plus the number of models in better groups.
pub fn bootstrap_rank(
    models: &[(String, Array2<f64>)],
    labels: &Array2<f64>,
    task: TaskKind,
    cfg: &BootstrapConfig,
) -> Result<RankTable> {
    if models.is_empty() {
        return Err(Error::Data("no models to rank".into()));
    }
    if !(cfg.confidence > 0.0 && cfg.confidence < 1.0) || cfg.resamples == 0 {
        return Err(Error::Config("bootstrap needs resamples >= 1 and confidence in (0, 1)".into()));
    }
    for (name, p) in models {
        if p.dim() != labels.dim() {
            return Err(Error::Shape(format!(
                "model {name}: predictions {:?} are not aligned with labels {:?}",
                p.dim(),
                labels.dim()
            )));
        }
    }
    let scores = models
        .iter()
        .map(|(name, p)| {
            score_rows(p, labels, None, task)?
                .ok_or_else(|| Error::Data(format!("model {name}: no scorable target on the test set")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut remaining: Vec<usize> = (0..models.len()).collect();
    // best first; ties broken by input order
    remaining.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; models.len()];
    let mut groups = Vec::new();
    let mut placed = 0;
    while let Some(&reference) = remaining.first() {
        let mut group = vec![reference];
        let mut rest = Vec::new();
        for &m in &remaining[1..] {
            let seed = derive_seed(cfg.seed, &[reference as u64, m as u64]);
            let (lo, _) = difference_interval(&models[reference].1, &models[m].1, labels, task, cfg, seed)?;
            if lo <= 0.0 {
                group.push(m);
            } else {
                rest.push(m);
            }
        }
        for &m in &group {
            ranks[m] = placed + 1;
        }
        placed += group.len();
        groups.push(group);
        remaining = rest;
    }
    let shown = match task {
        TaskKind::MultilabelClassification => scores,
        TaskKind::Regression => scores.iter().map(|s| -s).collect(),
    };
    Ok(RankTable {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        scores: shown,
        ranks,
        groups,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = spearman(&x, &[0.1, 0.4, 0.5, 0.9, 2.0]).unwrap();
        assert_eq!(up.r, 1.0);
        assert_eq!(up.p, 0.0);
        assert!((up.p_exact.unwrap() - 1.0 / 120.0).abs() < 1e-15);
        let down = spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(down.r, -1.0);
        assert!(spearman(&x, &[1.0; 5]).is_err());
        assert!(spearman(&x[..2], &x[..2]).is_err());
        assert!(spearman(&(0..12).map(f64::from).collect::<Vec<_>>(), &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap().p_exact.is_none());
    }

    #[test]
    fn t_approximation_matches_reported_cells() {
        // r = 0.9 and 0.7 at n = 5 give p = 0.037 and 0.188
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let a = spearman(&x, &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((a.r - 0.9).abs() < 1e-12 && (a.p - 0.037).abs() < 5e-4, "{a:?}");
        let b = spearman(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((b.r - 0.8).abs() < 1e-12);
        let c = spearman(&x, &[1.0, 3.0, 4.0, 2.0, 5.0]).unwrap();
        assert!((c.r - 0.7).abs() < 1e-12 && (c.p - 0.188).abs() < 5e-4, "{c:?}");
    }

    proptest! {
        #[test]
        fn spearman_equals_spearman_of_ranks(
            x in proptest::collection::vec(-10i32..10, 5..15),
            y in proptest::collection::vec(-10i32..10, 5..15),
        ) {
            let n = x.len().min(y.len());
            let x: Vec<f64> = x[..n].iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = y[..n].iter().map(|&v| v as f64).collect();
            if let Ok(a) = spearman(&x, &y) {
                let b = spearman(&average_ranks(&x), &average_ranks(&y)).unwrap();
                prop_assert!((a.r - b.r).abs() < 1e-12);
            }
        }
    }

    fn scenario(n: usize, seed: u64) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = Array2::from_shape_fn((n, 1), |(i, _)| (i % 2) as f64);
        let noisy = |rng: &mut ChaCha8Rng, signal: f64| {
            Array2::from_shape_fn((n, 1), |(i, _)| signal * (i % 2) as f64 + rng.gen_range(0.0..1.0))
        };
        let a = noisy(&mut rng, 0.5);
        let b = noisy(&mut rng, 0.5);
        let c = noisy(&mut rng, 0.0);
        (labels, vec![a, b, c])
    }

    #[test]
    fn identical_models_tie_and_scenarios_rank() {
        let cfg = BootstrapConfig { resamples: 200, ..Default::default() };
        let (labels, m) = scenario(200, 1);
        let same = bootstrap_rank(&[("x".into(), m[0].clone()), ("y".into(), m[0].clone())], &labels, TaskKind::MultilabelClassification, &cfg).unwrap();
        assert_eq!(same.ranks, vec![1, 1]);
        let t = bootstrap_rank(
            &[("a".into(), m[0].clone()), ("b".into(), m[1].clone()), ("c".into(), m[2].clone())],
            &labels,
            TaskKind::MultilabelClassification,
            &cfg,
        )
        .unwrap();
        assert_eq!(t.ranks, vec![1, 1, 3]);
        assert!(t.csv().starts_with("model,score,rank,group\n"));
        let bad = Array2::zeros((10, 1));
        assert!(bootstrap_rank(&[("a".into(), bad)], &labels, TaskKind::MultilabelClassification, &cfg).is_err());
    }

    #[test]
    fn improving_predictions_never_worsens_rank() {
        let cfg = BootstrapConfig { resamples: 100, ..Default::default() };
        let (labels, m) = scenario(120, 4);
        let models: Vec<(String, Array2<f64>)> = m.iter().enumerate().map(|(i, p)| (format!("m{i}"), p.clone())).collect();
        let base = bootstrap_rank(&models, &labels, TaskKind::MultilabelClassification, &cfg).unwrap();
        let mut better = models.clone();
        better[2].1 = &better[2].1 * 0.5 + &labels * 0.5;
        let after = bootstrap_rank(&better, &labels, TaskKind::MultilabelClassification, &cfg).unwrap();
        assert!(after.ranks[2] <= base.ranks[2]);
    }

    #[test]
    fn regression_ranks_lower_error_first() {
        let cfg = BootstrapConfig { resamples: 100, ..Default::default() };
        let labels = Array2::from_shape_fn((100, 1), |(i, _)| i as f64 / 10.0);
        let good = &labels + 0.01;
        let bad = &labels + 3.0;
        let t = bootstrap_rank(&[("bad".into(), bad), ("good".into(), good)], &labels, TaskKind::Regression, &cfg).unwrap();
        assert_eq!(t.ranks, vec![2, 1]);
        assert!((t.scores[1] - 0.01).abs() < 1e-9);
    }
}
