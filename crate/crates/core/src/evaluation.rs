//! Prequential scoring of posterior predictive batches.
//!
//! LPPD is computed on the untruncated predictive density, point errors on
//! the mean of the truncated draws, and the drift signal on the mean of the
//! per-row predictive medians. All metrics are in target units.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::exec::{Execution, CHUNK_ROWS};
use crate::{Error, Result};

/// Row-major matrix with one row per observation and one column per draw.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowDraws {
    pub n_rows: usize,
    pub n_draws: usize,
    pub values: Vec<f64>,
}

impl RowDraws {
    pub fn new(n_rows: usize, n_draws: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_rows * n_draws, "row draw matrix has the wrong size");
        RowDraws {
            n_rows,
            n_draws,
            values,
        }
    }

    /// Builds the matrix from ragged rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_draws = rows.first().map_or(0, Vec::len);
        RowDraws::new(rows.len(), n_draws, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_draws..(i + 1) * self.n_draws]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows).map(|i| self.row(i))
    }
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lppd {
    pub total: f64,
    pub per_row: Vec<f64>,
}

impl Lppd {
    /// Rows whose predictive density underflowed or was undefined.
    pub fn non_finite_rows(&self) -> Vec<usize> {
        self.per_row
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
            .collect()
    }
}

/// `sum_i log mean_s p(y_i | theta_s)` from per-row, per-draw log-densities.
pub fn lppd(logdens: &RowDraws, exec: Execution) -> Lppd {
    let n_chunks = logdens.n_rows.div_ceil(CHUNK_ROWS);
    let per_row: Vec<f64> = exec
        .map_range(n_chunks, |k| {
            let lo = k * CHUNK_ROWS;
            let hi = (lo + CHUNK_ROWS).min(logdens.n_rows);
            (lo..hi).map(|i| log_mean_exp(logdens.row(i))).collect::<Vec<_>>()
        })
        .concat();
    Lppd {
        total: per_row.iter().sum(),
        per_row,
    }
}

pub fn predictive_means(draws: &RowDraws) -> Vec<f64> {
    draws
        .rows()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-row median of the finite draws; `None` for rows without any.
pub fn predictive_medians(draws: &RowDraws, exec: Execution) -> Vec<Option<f64>> {
    exec.map_range(draws.n_rows, |i| {
        let mut finite: Vec<f64> = draws.row(i).iter().copied().filter(|v| v.is_finite()).collect();
        (!finite.is_empty()).then(|| median(&mut finite))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointErrors {
    pub mae: f64,
    pub rmse: f64,
}

pub fn point_errors(forecasts: &[f64], actuals: &[f64]) -> Result<PointErrors> {
    if forecasts.len() != actuals.len() {
        return Err(Error::Dimension {
            expected: actuals.len(),
            got: forecasts.len(),
        });
    }
    if actuals.is_empty() {
        return Err(Error::Empty("no rows to score".into()));
    }
    let n = actuals.len() as f64;
    let (abs, sq) = forecasts
        .iter()
        .zip(actuals)
        .fold((0.0, 0.0), |(a, s), (f, y)| (a + (f - y).abs(), s + (f - y).powi(2)));
    Ok(PointErrors {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationFit {
    pub pred_location: f64,
    pub actual_mean: f64,
    /// Rows left out because they had no finite draws.
    pub excluded_rows: usize,
}

impl LocationFit {
    /// `|pred - actual| / |actual|`.
    pub fn relative_error(&self) -> f64 {
        (self.pred_location - self.actual_mean).abs() / self.actual_mean.abs()
    }
}

pub fn location_fit(draws: &RowDraws, actuals: &[f64], exec: Execution) -> Result<LocationFit> {
    if draws.n_rows != actuals.len() {
        return Err(Error::Dimension {
            expected: actuals.len(),
            got: draws.n_rows,
        });
    }
    if actuals.is_empty() {
        return Err(Error::Empty("no rows to score".into()));
    }
    let medians = predictive_medians(draws, exec);
    let kept: Vec<f64> = medians.iter().flatten().copied().collect();
    let excluded_rows = medians.len() - kept.len();
    Ok(LocationFit {
        pred_location: kept.iter().sum::<f64>() / kept.len() as f64,
        actual_mean: actuals.iter().sum::<f64>() / actuals.len() as f64,
        excluded_rows,
    })
}

/// Scores of one batch together with running totals.
///
/// `rows_seen` is the logical clock: rows consumed up to and including this
/// batch. `in_sample` marks the first batch, which is scored by the state
/// fit on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrequentialRecord {
    pub batch_index: usize,
    pub rows: usize,
    pub rows_seen: usize,
    pub in_sample: bool,
    pub lppd: f64,
    pub mae: f64,
    pub rmse: f64,
    pub pred_location: f64,
    pub actual_mean: f64,
    pub divergences: usize,
    pub cum_lppd: f64,
    pub cum_mae: f64,
    pub cum_rmse: f64,
}

/// Running per-row averages over all batches scored so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CumulativeMetrics {
    rows: usize,
    lppd: f64,
    abs_err: f64,
    sq_err: f64,
}

impl CumulativeMetrics {
    pub fn add(&mut self, rows: usize, lppd_total: f64, errors: PointErrors) {
        let n = rows as f64;
        self.rows += rows;
        self.lppd += lppd_total;
        self.abs_err += errors.mae * n;
        self.sq_err += errors.rmse * errors.rmse * n;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn mean_lppd(&self) -> f64 {
        self.lppd / self.rows as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs_err / self.rows as f64
    }

    pub fn rmse(&self) -> f64 {
        (self.sq_err / self.rows as f64).sqrt()
    }
}

pub fn write_metrics<W: Write>(out: W, records: &[PrequentialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<PrequentialRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Differences `a - b` for one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchDelta {
    pub batch_index: usize,
    pub lppd: f64,
    pub mae: f64,
    pub rmse: f64,
    pub cum_lppd: f64,
    pub cum_mae: f64,
    pub cum_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub deltas: Vec<BatchDelta>,
    /// Batches where `a` has strictly higher LPPD, lower MAE, lower RMSE.
    pub a_wins: [usize; 3],
    pub b_wins: [usize; 3],
}

impl Comparison {
    pub fn final_delta(&self) -> Option<&BatchDelta> {
        self.deltas.last()
    }
}

/// Compares two metric series batch by batch.
pub fn compare(a: &[PrequentialRecord], b: &[PrequentialRecord]) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::Schema(format!(
            "metric files have different batch counts ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut a_wins = [0; 3];
    let mut b_wins = [0; 3];
    let mut deltas = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        if x.batch_index != y.batch_index {
            return Err(Error::Schema(format!(
                "batch indices differ ({} vs {})",
                x.batch_index, y.batch_index
            )));
        }
        let d = BatchDelta {
            batch_index: x.batch_index,
            lppd: x.lppd - y.lppd,
            mae: x.mae - y.mae,
            rmse: x.rmse - y.rmse,
            cum_lppd: x.cum_lppd - y.cum_lppd,
            cum_mae: x.cum_mae - y.cum_mae,
            cum_rmse: x.cum_rmse - y.cum_rmse,
        };
        for (k, better) in [d.lppd > 0.0, d.mae < 0.0, d.rmse < 0.0].into_iter().enumerate() {
            if better {
                a_wins[k] += 1;
            }
        }
        for (k, worse) in [d.lppd < 0.0, d.mae > 0.0, d.rmse > 0.0].into_iter().enumerate() {
            if worse {
                b_wins[k] += 1;
            }
        }
        deltas.push(d);
    }
    Ok(Comparison { deltas, a_wins, b_wins })
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic critical distance at level `alpha` for effective size `n`.
/// For two samples of sizes `n` and `m` pass `n * m / (n + m)`.
pub fn ks_critical(n_effective: f64, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / n_effective.sqrt()
}

/// Effective sample size from autocorrelations summed in pairs until the
/// first non-positive pair.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag).map(|t| (xs[t] - mean) * (xs[t + lag] - mean)).sum::<f64>() / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_row(v: Vec<f64>) -> RowDraws {
        RowDraws::from_rows(&[v])
    }

    #[test]
    fn lppd_single_draw_is_identity() {
        let l = lppd(&one_row(vec![-1.5]), Execution::Sequential);
        assert_eq!(l.total, -1.5);
    }

    #[test]
    fn lppd_averages_in_probability_space() {
        let l = lppd(&one_row(vec![0.2f64.ln(), 0.4f64.ln()]), Execution::Sequential);
        assert!((l.total - (-1.2039728043259361)).abs() < 1e-12);
    }

    #[test]
    fn lppd_is_additive_over_rows() {
        let row = vec![-0.3, -2.0, -7.5];
        let one = lppd(&one_row(row.clone()), Execution::Sequential).total;
        let two = lppd(&RowDraws::from_rows(&[row.clone(), row]), Execution::Sequential).total;
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn lppd_reports_underflowed_rows() {
        let d = RowDraws::from_rows(&[vec![-1.0], vec![f64::NEG_INFINITY], vec![-2.0]]);
        let l = lppd(&d, Execution::Sequential);
        assert_eq!(l.non_finite_rows(), vec![1]);
    }

    #[test]
    fn lppd_stable_for_very_negative_values() {
        let l = lppd(&one_row(vec![-1000.0, -1000.0]), Execution::Sequential);
        assert!((l.total + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn point_error_examples() {
        let e = point_errors(&[2.0], &[2.0]).unwrap();
        assert_eq!((e.mae, e.rmse), (0.0, 0.0));
        let e = point_errors(&[1.0, 3.0], &[2.0, 2.0]).unwrap();
        assert_eq!((e.mae, e.rmse), (1.0, 1.0));
        let e = point_errors(&[0.0, 4.0], &[2.0, 2.0]).unwrap();
        assert_eq!((e.mae, e.rmse), (2.0, 2.0));
        assert!(point_errors(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn location_fit_constant_draws() {
        let d = RowDraws::from_rows(&[vec![5.0; 4], vec![5.0; 4]]);
        let f = location_fit(&d, &[4.0, 6.0], Execution::Sequential).unwrap();
        assert_eq!((f.pred_location, f.actual_mean), (5.0, 5.0));
        assert_eq!(f.excluded_rows, 0);
    }

    #[test]
    fn location_fit_skips_rows_without_finite_draws() {
        let d = RowDraws::from_rows(&[vec![1.0, 3.0], vec![f64::NAN, f64::NAN]]);
        let f = location_fit(&d, &[2.0, 2.0], Execution::Sequential).unwrap();
        assert_eq!(f.pred_location, 2.0);
        assert_eq!(f.excluded_rows, 1);
    }

    #[test]
    fn cumulative_metrics_weight_by_rows() {
        let mut c = CumulativeMetrics::default();
        c.add(1, -2.0, PointErrors { mae: 1.0, rmse: 1.0 });
        c.add(3, -3.0, PointErrors { mae: 3.0, rmse: 3.0 });
        assert_eq!(c.rows(), 4);
        assert!((c.mean_lppd() + 1.25).abs() < 1e-12);
        assert!((c.mae() - 2.5).abs() < 1e-12);
        assert!((c.rmse() - 7.0f64.sqrt()).abs() < 1e-12);
    }

    fn record(i: usize, lppd: f64) -> PrequentialRecord {
        PrequentialRecord {
            batch_index: i,
            rows: 10,
            rows_seen: 10 * i,
            in_sample: i == 1,
            lppd,
            mae: 1.5,
            rmse: 2.5,
            pred_location: 3.0,
            actual_mean: 3.25,
            divergences: 0,
            cum_lppd: lppd / 10.0,
            cum_mae: 1.5,
            cum_rmse: 2.5,
        }
    }

    #[test]
    fn metrics_round_trip_and_compare() {
        let recs = vec![record(1, -10.0), record(2, -9.5)];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "batch_index,rows,rows_seen,in_sample,lppd,mae,rmse,pred_location,actual_mean,divergences,cum_lppd,cum_mae,cum_rmse\n"
        ));
        let back = read_metrics(&buf[..]).unwrap();
        assert_eq!(back, recs);
        let cmp = compare(&back, &recs).unwrap();
        assert!(cmp.deltas.iter().all(|d| d.lppd == 0.0 && d.mae == 0.0 && d.cum_rmse == 0.0));
        assert_eq!(cmp.a_wins, [0, 0, 0]);
        let better = vec![record(1, -9.0), record(2, -9.0)];
        let cmp = compare(&better, &recs).unwrap();
        assert!(cmp.final_delta().unwrap().lppd > 0.0);
        assert_eq!(cmp.a_wins[0], 2);
        assert!(compare(&recs[..1], &recs).is_err());
    }

    #[test]
    fn ks_distances() {
        let xs: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        assert!(ks_one_sample(&xs, |x| x.clamp(0.0, 1.0)) < 0.002);
        assert_eq!(ks_two_sample(&xs, &xs), 0.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.5).collect();
        assert!((ks_two_sample(&xs, &shifted) - 0.5).abs() < 0.01);
        assert!((ks_critical(100.0, 0.05) - 0.1358).abs() < 1e-3);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-10);
    }

    #[test]
    fn ess_of_independent_and_correlated_series() {
        use rand::Rng;
        let mut rng = crate::distributions::rng_from_seed(1);
        let iid: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let e = effective_sample_size(&iid);
        assert!(e > 3000.0 && e < 5500.0, "{e}");
        let mut ar = vec![0.0; 4000];
        for t in 1..ar.len() {
            ar[t] = 0.9 * ar[t - 1] + rng.random::<f64>() - 0.5;
        }
        let e = effective_sample_size(&ar);
        assert!(e < 600.0, "{e}");
    }
}
