use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Per-target scores with the excluded targets listed separately.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScores {
    /// `None` for excluded targets.
    pub per_target: Vec<Option<f64>>,
    /// `(target, reason)` for every excluded target.
    pub excluded: Vec<(usize, String)>,
    /// Unweighted mean over included targets; `None` if all were excluded.
    pub macro_score: Option<f64>,
}

impl TargetScores {
    fn from_parts(per_target: Vec<Option<f64>>, excluded: Vec<(usize, String)>) -> Self {
        let valid: Vec<f64> = per_target.iter().flatten().copied().collect();
        let macro_score = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        TargetScores {
            per_target,
            excluded,
            macro_score,
        }
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share ranks i+1..=j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// AUROC of one target by the Mann-Whitney rank statistic (ties count 0.5).
/// `None` when only one class is present.
pub fn auroc(scores: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<Option<f64>> {
    let scores: Vec<f64> = scores.to_vec();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score in AUROC input".into()));
    }
    let mut n_pos = 0usize;
    for &y in labels {
        if y == 1.0 {
            n_pos += 1;
        } else if y != 0.0 {
            return Err(Error::Data(format!("classification label {y} is not 0 or 1")));
        }
    }
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let ranks = average_ranks(&scores);
    // rank sums are exact multiples of 0.5, so the numerator is exact
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// Per-target AUROC over columns of `[N, T]` arrays plus the macro mean.
/// Targets with a single observed class are excluded and listed.
pub fn macro_auroc(scores: &Array2<f64>, labels: &Array2<f64>) -> Result<TargetScores> {
    if scores.dim() != labels.dim() {
        return Err(Error::Shape(format!("scores {:?} vs labels {:?}", scores.dim(), labels.dim())));
    }
    let mut per_target = Vec::new();
    let mut excluded = Vec::new();
    for t in 0..scores.ncols() {
        let a = auroc(scores.column(t), labels.column(t))?;
        if a.is_none() {
            excluded.push((t, "single class".to_string()));
        }
        per_target.push(a);
    }
    Ok(TargetScores::from_parts(per_target, excluded))
}

/// Mean absolute error in units of the training-split standard deviation.
/// Targets with zero training variance are excluded and listed.
pub fn standardized_mae(preds: &Array2<f64>, targets: &Array2<f64>, train_mean: &[f64], train_std: &[f64]) -> Result<TargetScores> {
    let t = preds.ncols();
    if preds.dim() != targets.dim() || train_mean.len() != t || train_std.len() != t {
        return Err(Error::Shape(format!(
            "preds {:?}, targets {:?}, {} means, {} stds",
            preds.dim(),
            targets.dim(),
            train_mean.len(),
            train_std.len()
        )));
    }
    if preds.nrows() == 0 {
        return Err(Error::Data("no samples to score".into()));
    }
    let mut per_target = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..t {
        let sd = train_std[j];
        if !(sd > 0.0) {
            excluded.push((j, "zero training std".to_string()));
            per_target.push(None);
            continue;
        }
        let mae = preds
            .column(j)
            .iter()
            .zip(targets.column(j))
            .map(|(p, y)| ((p - train_mean[j]) / sd - (y - train_mean[j]) / sd).abs())
            .sum::<f64>()
            / preds.nrows() as f64;
        per_target.push(Some(mae));
    }
    Ok(TargetScores::from_parts(per_target, excluded))
}
