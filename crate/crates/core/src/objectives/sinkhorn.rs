use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Balanced soft assignment of `B` rows to `K` columns: alternating
/// normalization of `exp(logits / epsilon)` (global max subtracted first).
/// Output rows sum to 1 and column sums approach `B / K` as iterations grow.
pub fn sinkhorn_knopp(logits: &Array2<f64>, num_iters: usize, epsilon: f64) -> Result<Array2<f64>> {
    let (b, k) = logits.dim();
    if b == 0 || k == 0 {
        return Err(Error::Shape("sinkhorn needs a non-empty logit matrix".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits passed to sinkhorn".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q = logits.mapv(|v| ((v - max) / epsilon).exp());
    let total: f64 = q.sum();
    q /= total;
    for _ in 0..num_iters {
        // each column (cluster) receives mass 1/K
        let col = q.sum_axis(Axis(0));
        for mut row in q.rows_mut() {
            row.iter_mut().zip(col.iter()).for_each(|(v, &c)| *v /= c * k as f64);
        }
        // each row (sample) carries mass 1/B
        for mut row in q.rows_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / (s * b as f64));
        }
    }
    // final row normalization so that each sample is a distribution
    for mut row in q.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sinkhorn produced non-finite assignments (underflow)".into()));
    }
    Ok(q)
}

/// Mean Shannon entropy (nats) of the rows.
pub fn mean_row_entropy(p: &Array2<f64>) -> f64 {
    let n = p.nrows() as f64;
    p.rows()
        .into_iter()
        .map(|r| -r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_uniform_assignment() {
        let q = sinkhorn_knopp(&Array2::zeros((8, 4)), 3, 0.05).unwrap();
        assert!(q.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_matches_hand_iteration() {
        let logits = ndarray::arr2(&[[10.0, 0.0], [0.0, 10.0]]);
        let q = sinkhorn_knopp(&logits, 3, 1.0).unwrap();
        // hand oracle: symmetric matrix, every normalization keeps the
        // diagonal share at e^10 / (e^10 + 1)
        let d = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((q[[0, 0]] - d).abs() < 1e-12 && (q[[1, 1]] - d).abs() < 1e-12);
        assert!(q[[0, 1]] < 0.01 && q[[1, 0]] < 0.01);
    }

    #[test]
    fn errors() {
        let mut l = Array2::zeros((2, 2));
        l[[0, 0]] = f64::NAN;
        assert!(matches!(sinkhorn_knopp(&l, 3, 0.05), Err(Error::Numerical(_))));
        assert!(sinkhorn_knopp(&Array2::zeros((2, 2)), 3, 0.0).is_err());
    }

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut a = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        for mut r in a.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        a
    }

    #[test]
    fn cosine_scores_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [128usize, 256] {
            let f = unit_rows(64, 512, &mut rng);
            let p = unit_rows(k, 512, &mut rng);
            let q = sinkhorn_knopp(&f.dot(&p.t()), 3, 0.05).unwrap();
            for c in q.sum_axis(Axis(0)).iter() {
                assert!((c / (64.0 / k as f64) - 1.0).abs() < 0.1, "{c}");
            }
            assert!(mean_row_entropy(&q) >= 0.5 * (k as f64).ln());
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(seed in any::<u64>(), b in 1usize..20, k in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Array2::from_shape_fn((b, k), |_| rng.gen_range(-1.0..1.0));
            let q = sinkhorn_knopp(&l, 3, 0.05).unwrap();
            for r in q.rows() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
