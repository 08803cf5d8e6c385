//! Least squares and least percentage squares for a one-regressor linear
//! model, and the noisy-line generator used to compare them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    /// Sum of squared errors.
    pub fn squared_error(&self, points: &[(f64, f64)]) -> f64 {
        points.iter().map(|&(x, d)| (self.predict(x) - d).powi(2)).sum()
    }

    /// Sum of squared percentage errors.
    pub fn squared_percentage_error(&self, points: &[(f64, f64)]) -> f64 {
        points.iter().map(|&(x, d)| ((self.predict(x) - d) / d).powi(2)).sum()
    }
}

/// Ordinary least squares.
pub fn ls_fit(points: &[(f64, f64)]) -> Result<LinearModel> {
    if points.len() < 2 {
        return Err(EfmError::DegenerateDesign("need at least two points".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_d = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxd: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_d)).sum();
    if sxx == 0.0 {
        return Err(EfmError::DegenerateDesign("all x values are equal".into()));
    }
    let slope = sxd / sxx;
    Ok(LinearModel {
        intercept: mean_d - slope * mean_x,
        slope,
    })
}

/// Divides each point's regressors `(1, x)` by its response, giving
/// `((1/d, x/d), 1)`.
pub fn instance_normalize(points: &[(f64, f64)]) -> Result<Vec<([f64; 2], f64)>> {
    points
        .iter()
        .enumerate()
        .map(|(index, &(x, d))| {
            if d > 0.0 {
                Ok(([1.0 / d, x / d], 1.0))
            } else {
                Err(EfmError::NonPositiveActual { index, value: d })
            }
        })
        .collect()
}

/// Least percentage squares: least squares without intercept on the
/// instance-normalized points.
pub fn lps_fit(points: &[(f64, f64)]) -> Result<LinearModel> {
    if points.len() < 2 {
        return Err(EfmError::DegenerateDesign("need at least two points".into()));
    }
    let normalized = instance_normalize(points)?;
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ([u, v], y) in normalized {
        a11 += u * u;
        a12 += u * v;
        a22 += v * v;
        b1 += u * y;
        b2 += v * y;
    }
    let det = a11 * a22 - a12 * a12;
    if !(det.abs() > 1e-14 * a11 * a22) {
        return Err(EfmError::DegenerateDesign("normalized design is singular".into()));
    }
    Ok(LinearModel {
        intercept: (a22 * b1 - a12 * b2) / det,
        slope: (a11 * b2 - a12 * b1) / det,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub intercept: f64,
    pub slope: f64,
    pub x_range: (f64, f64),
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 100,
            intercept: 1200.0,
            slope: -10.0,
            x_range: (1.0, 50.0),
            sigma: 10.0,
            seed: 0,
        }
    }
}

/// Points on the configured line plus Gaussian noise. A draw that would
/// give a non-positive response is redrawn.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<(f64, f64)>> {
    if cfg.n < 2 {
        return Err(EfmError::Config("synthetic sample needs n >= 2".into()));
    }
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| EfmError::Config(format!("sigma {}: {e}", cfg.sigma)))?;
    let (lo, hi) = cfg.x_range;
    if !(lo < hi) {
        return Err(EfmError::Config("x range must be increasing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::with_capacity(cfg.n);
    while points.len() < cfg.n {
        let x = rng.random_range(lo..=hi);
        let mean = cfg.intercept + cfg.slope * x;
        let mut attempts = 0;
        let d = loop {
            let d = mean + noise.sample(&mut rng);
            if d > 0.0 {
                break d;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(EfmError::Config("noise too large to draw positive responses".into()));
            }
        };
        points.push((x, d));
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub ratio_indicator: f64,
    pub mes_ls: f64,
    pub mes_lps: f64,
    pub mpes_ls: f64,
    pub mpes_lps: f64,
    pub under_ls: f64,
    pub under_lps: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "sigma,ratio_indicator,mes_ls,mes_lps,mpes_ls,mpes_lps,under_ls,under_lps";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sigma,
            self.ratio_indicator,
            self.mes_ls,
            self.mes_lps,
            self.mpes_ls,
            self.mpes_lps,
            self.under_ls,
            self.under_lps
        )
    }
}

/// Fits both regressions on one generated sample per noise level. Sample `i`
/// uses seed `base.seed + i`.
pub fn sweep_sigma(sigmas: &[f64], base: &SyntheticConfig) -> Result<Vec<SweepRow>> {
    if sigmas.is_empty() {
        return Err(EfmError::EmptyInput("no noise levels to sweep".into()));
    }
    sigmas
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let cfg = SyntheticConfig {
                sigma,
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            };
            let points = generate_synthetic(&cfg)?;
            let actual: Vec<f64> = points.iter().map(|p| p.1).collect();
            let fitted = |m: LinearModel| points.iter().map(|p| m.predict(p.0)).collect::<Vec<_>>();
            let ls = metrics::diagnostics(&fitted(ls_fit(&points)?), &actual)?;
            let lps = metrics::diagnostics(&fitted(lps_fit(&points)?), &actual)?;
            Ok(SweepRow {
                sigma,
                ratio_indicator: ls.ratio_indicator,
                mes_ls: ls.mes,
                mes_lps: lps.mes,
                mpes_ls: ls.mpes,
                mpes_lps: lps.mpes,
                under_ls: ls.underestimation_ratio,
                under_lps: lps.underestimation_ratio,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SweepRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EfmError::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(EfmError::EmptyInput("rank correlation needs two pairs".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn line(n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| (1.0 + i as f64, 1200.0 - 10.0 * (1.0 + i as f64))).collect()
    }

    /// Least squares through the normal equations of an explicit design.
    fn normal_equations(rows: &[[f64; 2]], y: &[f64]) -> (f64, f64) {
        let x = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
        let y = DVector::from_column_slice(y);
        let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
        (beta[0], beta[1])
    }

    #[test]
    fn exact_line_is_recovered_by_both() {
        let pts = line(10);
        for m in [ls_fit(&pts).unwrap(), lps_fit(&pts).unwrap()] {
            assert!((m.intercept - 1200.0).abs() < 1e-10 * 1200.0);
            assert!((m.slope + 10.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_points_interpolate() {
        let m = ls_fit(&[(1.0, 3.0), (3.0, 7.0)]).unwrap();
        assert!((m.slope - 2.0).abs() < 1e-15 && (m.intercept - 1.0).abs() < 1e-15);
        assert!(ls_fit(&[(1.0, 3.0), (1.0, 7.0)]).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(instance_normalize(&[(10.0, 2.0)]).unwrap(), vec![([0.5, 5.0], 1.0)]);
        assert_eq!(instance_normalize(&[(3.0, 1.0)]).unwrap(), vec![([1.0, 3.0], 1.0)]);
        assert!(instance_normalize(&[(3.0, 0.0)]).is_err());
    }

    #[test]
    fn noiseless_sample_lies_on_line() {
        let pts = generate_synthetic(&SyntheticConfig {
            sigma: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert!(pts.iter().all(|&(x, d)| (d - (1200.0 - 10.0 * x)).abs() < 1e-9));
        assert!(pts.iter().all(|&(x, _)| (1.0..=50.0).contains(&x)));
    }

    #[test]
    fn small_noise_ratio_is_near_three() {
        let pts = generate_synthetic(&SyntheticConfig {
            sigma: 10.0,
            seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let d: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let r = metrics::ratio_indicator(&d);
        assert!((2.5..3.5).contains(&r), "{r}");
    }

    #[test]
    fn zero_noise_sweep_row_is_exact() {
        let rows = sweep_sigma(&[0.0], &SyntheticConfig::default()).unwrap();
        assert!(rows[0].mes_ls < 1e-18 && rows[0].mes_lps < 1e-12);
        assert!(rows[0].mpes_ls < 1e-18 && rows[0].mpes_lps < 1e-18);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn large_noise_separates_underestimation() {
        let rows = sweep_sigma(&[200.0], &SyntheticConfig::default()).unwrap();
        let r = &rows[0];
        assert!((20.0..=150.0).contains(&r.ratio_indicator), "{r:?}");
        assert!(r.under_lps >= 0.6 && (0.4..=0.6).contains(&r.under_ls), "{r:?}");
    }

    #[test]
    fn sweep_gap_grows_with_spread() {
        let sigmas: Vec<f64> = (1..=200).map(f64::from).collect();
        let rows = sweep_sigma(&sigmas, &SyntheticConfig::default()).unwrap();
        for r in &rows {
            assert!(r.mes_ls <= r.mes_lps * (1.0 + 1e-9));
            assert!(r.mpes_lps <= r.mpes_ls * (1.0 + 1e-9));
        }
        let ratio: Vec<f64> = rows.iter().map(|r| r.ratio_indicator).collect();
        let gap: Vec<f64> = rows.iter().map(|r| r.under_lps - r.under_ls).collect();
        let rho = spearman(&ratio, &gap).unwrap();
        assert!(rho > 0.0, "{rho}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn fits_match_normal_equations(sigma in 0.0f64..300.0, seed in 0u64..1000) {
            let pts = generate_synthetic(&SyntheticConfig { sigma, seed, n: 30, ..SyntheticConfig::default() }).unwrap();
            let ls = ls_fit(&pts).unwrap();
            let rows: Vec<[f64; 2]> = pts.iter().map(|p| [1.0, p.0]).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (b0, b1) = normal_equations(&rows, &y);
            prop_assert!((ls.intercept - b0).abs() < 1e-9 * b0.abs().max(1.0));
            prop_assert!((ls.slope - b1).abs() < 1e-9 * b1.abs().max(1.0));

            let lps = lps_fit(&pts).unwrap();
            let rows: Vec<[f64; 2]> = pts.iter().map(|p| [1.0 / p.1, p.0 / p.1]).collect();
            let (b0, b1) = normal_equations(&rows, &vec![1.0; pts.len()]);
            prop_assert!((lps.intercept - b0).abs() < 1e-8 * b0.abs().max(1.0));
            prop_assert!((lps.slope - b1).abs() < 1e-8 * b1.abs().max(1.0));
        }

        #[test]
        fn each_fit_is_optimal_for_its_own_criterion(sigma in 1.0f64..300.0, seed in 0u64..1000) {
            let pts = generate_synthetic(&SyntheticConfig { sigma, seed, n: 40, ..SyntheticConfig::default() }).unwrap();
            let ls = ls_fit(&pts).unwrap();
            let lps = lps_fit(&pts).unwrap();
            let es_ls = ls.squared_error(&pts);
            let es_lps = lps.squared_error(&pts);
            let pes_ls = ls.squared_percentage_error(&pts);
            let pes_lps = lps.squared_percentage_error(&pts);
            prop_assert!(es_ls <= es_lps * (1.0 + 1e-9));
            prop_assert!(pes_lps <= pes_ls * (1.0 + 1e-9));
            let d: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let r = metrics::ratio_indicator(&d);
            prop_assert!(es_lps <= r * es_ls * (1.0 + 1e-9));
            prop_assert!(pes_ls <= r * pes_lps * (1.0 + 1e-9));
            for (di, dj) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                let moved = LinearModel { intercept: lps.intercept + di, slope: lps.slope + dj };
                prop_assert!(moved.squared_percentage_error(&pts) >= pes_lps);
            }
        }
    }
}
