//! Run comparison: pair two runs' cumulative counts on the shared 1-second
//! grid, fit a least-squares trendline, and judge it against the y = x line.

use thiserror::Error;

use super::metrics::RunMetrics;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompareError {
    #[error("runs sampled on different grids ({a} vs {b} seconds)")]
    MismatchedGrids { a: usize, b: usize },
    #[error("need at least 3 paired points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Trendline above y=x: run B processes more at matching times.
    BFaster,
    AFaster,
    Comparable,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// (run A cumulative, run B cumulative) at each shared second.
    pub points: Vec<(u64, u64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub verdict: Verdict,
}

/// Least-squares fit of y on x with R^2 = 1 - SS_res / SS_tot.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in points {
        let predicted = slope * x + intercept;
        ss_res += (y - predicted) * (y - predicted);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    (slope, intercept, r_squared)
}

pub fn compare_series(a: &[u64], b: &[u64]) -> Result<ComparisonReport, CompareError> {
    if a.len() != b.len() {
        return Err(CompareError::MismatchedGrids {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(CompareError::TooFewPoints(a.len()));
    }
    let points: Vec<(u64, u64)> = a.iter().copied().zip(b.iter().copied()).collect();
    let as_f: Vec<(f64, f64)> = points.iter().map(|(x, y)| (*x as f64, *y as f64)).collect();
    let (slope, intercept, r_squared) = fit_line(&as_f);
    let verdict = if slope > 1.02 {
        Verdict::BFaster
    } else if slope < 0.98 {
        Verdict::AFaster
    } else {
        Verdict::Comparable
    };
    Ok(ComparisonReport {
        points,
        slope,
        intercept,
        r_squared,
        verdict,
    })
}

pub fn compare_runs(a: &RunMetrics, b: &RunMetrics) -> Result<ComparisonReport, CompareError> {
    compare_series(&a.cumulative, &b.cumulative)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_fit_exactly() {
        let a: Vec<u64> = (0..50).map(|i| i * 3 + (i % 4)).collect();
        let report = compare_series(&a, &a).unwrap();
        assert_eq!(report.slope, 1.0);
        assert_eq!(report.intercept, 0.0);
        assert_eq!(report.r_squared, 1.0);
        assert_eq!(report.verdict, Verdict::Comparable);
    }

    #[test]
    fn doubled_series_has_slope_two() {
        let a: Vec<u64> = (0..50).map(|i| i * 5 + (i % 3)).collect();
        let b: Vec<u64> = a.iter().map(|v| v * 2).collect();
        let report = compare_series(&a, &b).unwrap();
        assert!((report.slope - 2.0).abs() < 1e-12);
        assert_eq!(report.r_squared, 1.0);
        assert_eq!(report.verdict, Verdict::BFaster);
    }

    #[test]
    fn grid_and_size_errors() {
        let a = vec![1, 2, 3];
        assert_eq!(
            compare_series(&a, &[1, 2]).unwrap_err(),
            CompareError::MismatchedGrids { a: 3, b: 2 }
        );
        assert_eq!(
            compare_series(&[1, 2], &[1, 2]).unwrap_err(),
            CompareError::TooFewPoints(2)
        );
    }

    #[test]
    fn r_squared_stays_in_unit_interval() {
        let a: Vec<u64> = (0..100).collect();
        let b: Vec<u64> = (0..100).map(|i| (i * 7919) % 101).collect();
        let report = compare_series(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&report.r_squared));
    }
}
