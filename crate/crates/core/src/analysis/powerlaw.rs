use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    PurePower,
    PowerPlusFloor,
}

/// `y = C * N^-alpha + L0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub c: f64,
    pub alpha: f64,
    pub l0: f64,
    pub r_squared: f64,
    pub model: FitModel,
    pub converged: bool,
    /// Set for data without variance (r² reported as 1).
    pub degenerate: bool,
}

impl FitResult {
    pub fn predict(&self, n: f64) -> f64 {
        self.c * n.powf(-self.alpha) + self.l0
    }

    pub const CSV_HEADER: &'static str = "name,C,alpha,L0,R2";

    pub fn csv_row(&self, name: &str) -> String {
        format!("{name},{:?},{:?},{:?},{:?}", self.c, self.alpha, self.l0, self.r_squared)
    }
}

/// One CSV with a row per named fit.
pub fn fits_csv(fits: &[(String, FitResult)]) -> String {
    let mut s = format!("{}\n", FitResult::CSV_HEADER);
    for (name, f) in fits {
        let _ = writeln!(s, "{}", f.csv_row(name));
    }
    s
}

/// Search interval for the exponent.
const ALPHA_RANGE: (f64, f64) = (-2.0, 5.0);
const GRID: usize = 701;
const STARTS: [f64; 5] = [0.01, 0.05, 0.1, 0.3, 0.7];

/// Residual scale for least squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residuals {
    /// `f(N) - y`, the usual curve fit.
    #[default]
    Absolute,
    /// `(f(N) - y) / y`, matched to multiplicative noise.
    Relative,
}

/// Best `(C, L0, weighted sse)` for fixed alpha; `L0 >= 0` when the floor
/// is on.
fn profile(n: &[f64], y: &[f64], w: &[f64], alpha: f64, floor: bool) -> (f64, f64, f64) {
    let x: Vec<f64> = n.iter().map(|v| v.powf(-alpha)).collect();
    let sse = |c: f64, l0: f64| {
        x.iter()
            .zip(y)
            .zip(w)
            .map(|((xi, yi), wi)| wi * (yi - c * xi - l0).powi(2))
            .sum::<f64>()
    };
    let through_origin = || {
        let sxx: f64 = x.iter().zip(w).map(|(v, wi)| wi * v * v).sum();
        let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, b), wi)| wi * a * b).sum();
        let c = sxy / sxx;
        (c, 0.0, sse(c, 0.0))
    };
    if !floor {
        return through_origin();
    }
    let m: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(v, wi)| wi * v).sum::<f64>() / m;
    let ym = y.iter().zip(w).map(|(v, wi)| wi * v).sum::<f64>() / m;
    let sxx: f64 = x.iter().zip(w).map(|(v, wi)| wi * (v - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return through_origin();
    }
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, b), wi)| wi * (a - xm) * (b - ym)).sum();
    let c = sxy / sxx;
    let l0 = ym - c * xm;
    if l0 >= 0.0 {
        (c, l0, sse(c, l0))
    } else {
        through_origin()
    }
}

/// Golden-section minimization on `[a, b]`.
fn golden<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, bool) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..500 {
        if (b - a).abs() <= tol * (1.0 + c.abs()) {
            return ((a + b) / 2.0, true);
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    ((a + b) / 2.0, false)
}

/// Least-squares fit of `C N^-alpha (+ L0)` in y-space. For fixed alpha the
/// best C (and L0 >= 0) is linear least squares, so only alpha is searched:
/// a grid plus the standard starts, then golden-section refinement around
/// every local minimum found.
pub fn fit_power_law(n: &[f64], y: &[f64], with_floor: bool) -> Result<FitResult> {
    fit_power_law_with(n, y, with_floor, Residuals::Absolute)
}

/// [`fit_power_law`] with a choice of residual scale. R² is always
/// reported in y-space.
pub fn fit_power_law_with(n: &[f64], y: &[f64], with_floor: bool, residuals: Residuals) -> Result<FitResult> {
    let min_points = if with_floor { 4 } else { 3 };
    if n.len() != y.len() {
        return Err(Error::Shape(format!("{} sizes vs {} values", n.len(), y.len())));
    }
    if n.len() < min_points {
        return Err(Error::Data(format!("need at least {min_points} points, got {}", n.len())));
    }
    if n.iter().any(|v| !(*v > 0.0 && v.is_finite())) || n.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("sizes must be positive and strictly increasing".into()));
    }
    if y.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Data("values must be positive and finite".into()));
    }
    let model = if with_floor { FitModel::PowerPlusFloor } else { FitModel::PurePower };
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= f64::EPSILON * mean * mean * y.len() as f64 {
        return Ok(FitResult {
            c: mean,
            alpha: 0.0,
            l0: 0.0,
            r_squared: 1.0,
            model,
            converged: true,
            degenerate: true,
        });
    }

    // scale sizes so N^-alpha stays well conditioned; C is rescaled back
    let scale = n[0];
    let ns: Vec<f64> = n.iter().map(|v| v / scale).collect();
    let w: Vec<f64> = match residuals {
        Residuals::Absolute => vec![1.0; y.len()],
        Residuals::Relative => y.iter().map(|v| 1.0 / (v * v)).collect(),
    };
    let obj = |a: f64| profile(&ns, y, &w, a, with_floor).2;

    let mut candidates: Vec<f64> = (0..GRID)
        .map(|i| ALPHA_RANGE.0 + (ALPHA_RANGE.1 - ALPHA_RANGE.0) * i as f64 / (GRID - 1) as f64)
        .collect();
    candidates.extend(STARTS);
    candidates.sort_by(f64::total_cmp);
    let values: Vec<f64> = candidates.iter().map(|&a| obj(a)).collect();
    let step = (ALPHA_RANGE.1 - ALPHA_RANGE.0) / (GRID - 1) as f64;

    let mut best: Option<(f64, f64, bool)> = None;
    for i in 0..candidates.len() {
        let left = if i == 0 { f64::INFINITY } else { values[i - 1] };
        let right = values.get(i + 1).copied().unwrap_or(f64::INFINITY);
        if values[i] > left || values[i] > right {
            continue;
        }
        let lo = (candidates[i] - step).max(ALPHA_RANGE.0);
        let hi = (candidates[i] + step).min(ALPHA_RANGE.1);
        let (a, ok) = golden(obj, lo, hi, 1e-14);
        let v = obj(a);
        if best.is_none_or(|(_, bv, _)| v < bv) {
            best = Some((a, v, ok));
        }
    }
    let (alpha, _, converged) = best.expect("grid has a minimum");
    let (c, l0, _) = profile(&ns, y, &w, alpha, with_floor);
    let sse: f64 = ns.iter().zip(y).map(|(ni, yi)| (yi - c * ni.powf(-alpha) - l0).powi(2)).sum();
    let fit = FitResult {
        c: c * scale.powf(alpha),
        alpha,
        l0,
        r_squared: 1.0 - sse / ss_tot,
        model,
        converged: converged && alpha.is_finite() && c > 0.0,
        degenerate: false,
    };
    if !fit.converged {
        log::warn!("power-law fit did not converge cleanly: {fit:?}");
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    R2,
    R2Squared,
}

/// Fit-quality weighted mean exponent.
pub fn weighted_alpha(fits: &[FitResult], weighting: Weighting) -> Result<f64> {
    if fits.is_empty() {
        return Err(Error::Data("no fits to average".into()));
    }
    let w = |f: &FitResult| {
        let r = f.r_squared.max(0.0);
        match weighting {
            Weighting::R2 => r,
            Weighting::R2Squared => r * r,
        }
    };
    let total: f64 = fits.iter().map(w).sum();
    if total <= 0.0 {
        return Err(Error::Numerical("all fit weights are zero".into()));
    }
    Ok(fits.iter().map(|f| w(f) * f.alpha).sum::<f64>() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NS: [f64; 5] = [18e3, 45e3, 106e3, 753e3, 11e6];

    fn curve(c: f64, a: f64, l0: f64) -> Vec<f64> {
        NS.iter().map(|n| c * n.powf(-a) + l0).collect()
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let f = fit_power_law(&NS, &curve(2.0, 0.1, 0.05), true).unwrap();
        assert!((f.c - 2.0).abs() < 1e-4 && (f.alpha - 0.1).abs() < 1e-4 && (f.l0 - 0.05).abs() < 1e-4, "{f:?}");
        assert!(f.r_squared >= 1.0 - 1e-10);
        let p = fit_power_law(&NS, &curve(3.0, 0.25, 0.0), false).unwrap();
        assert!((p.c - 3.0).abs() < 1e-6 && (p.alpha - 0.25).abs() < 1e-8, "{p:?}");
    }

    #[test]
    fn refit_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = curve(2.0, 0.2, 0.1).iter().map(|v| v * (1.0 + 0.05 * rng.gen_range(-1.0..1.0))).collect();
        let f = fit_power_law(&NS, &y, true).unwrap();
        let again: Vec<f64> = NS.iter().map(|&n| f.predict(n)).collect();
        let g = fit_power_law(&NS, &again, true).unwrap();
        for (a, b) in [(f.c, g.c), (f.alpha, g.alpha), (f.l0, g.l0)] {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{f:?} vs {g:?}");
        }
    }

    #[test]
    fn relative_residuals_minimize_their_own_objective() {
        let clean = curve(2.0, 0.1, 0.05);
        let f = fit_power_law_with(&NS, &clean, true, Residuals::Relative).unwrap();
        assert!((f.alpha - 0.1).abs() < 1e-4 && (f.l0 - 0.05).abs() < 1e-4, "{f:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = clean.iter().map(|v| v * (1.0 + 0.02 * rng.gen_range(-1.0..1.0))).collect();
        let rel = |f: &FitResult| NS.iter().zip(&y).map(|(&n, v)| ((f.predict(n) - v) / v).powi(2)).sum::<f64>();
        let abs = |f: &FitResult| NS.iter().zip(&y).map(|(&n, v)| (f.predict(n) - v).powi(2)).sum::<f64>();
        let r = fit_power_law_with(&NS, &y, true, Residuals::Relative).unwrap();
        let a = fit_power_law(&NS, &y, true).unwrap();
        assert!(rel(&r) <= rel(&a) * (1.0 + 1e-9));
        assert!(abs(&a) <= abs(&r) * (1.0 + 1e-9));
    }

    #[test]
    fn flat_data_is_degenerate() {
        let f = fit_power_law(&NS, &[0.3; 5], true).unwrap();
        assert!(f.degenerate && f.alpha.abs() < 1e-6 && f.r_squared == 1.0);
    }

    #[test]
    fn input_validation() {
        assert!(fit_power_law(&NS[..3], &[1.0, 0.9, 0.8], true).is_err());
        assert!(fit_power_law(&[1.0, 1.0, 2.0], &[1.0, 0.9, 0.8], false).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, -0.9, 0.8], false).is_err());
    }

    #[test]
    fn weighted_alpha_examples() {
        let mk = |alpha, r2| FitResult { c: 1.0, alpha, l0: 0.0, r_squared: r2, model: FitModel::PurePower, converged: true, degenerate: false };
        assert_eq!(weighted_alpha(&[mk(0.2, 0.5)], Weighting::R2).unwrap(), 0.2);
        assert!((weighted_alpha(&[mk(0.1, 0.8), mk(0.3, 0.8)], Weighting::R2).unwrap() - 0.2).abs() < 1e-15);
        for w in [Weighting::R2, Weighting::R2Squared] {
            assert_eq!(weighted_alpha(&[mk(0.1, 1.0), mk(0.3, 0.0)], w).unwrap(), 0.1);
        }
        assert!(weighted_alpha(&[mk(0.1, 0.0)], Weighting::R2).is_err());
        assert!(fits_csv(&[("cpc".into(), mk(0.1, 0.9))]).starts_with("name,C,alpha,L0,R2\ncpc,"));
    }
}
