//! Metrics, boost percentages, Diebold-Mariano tests, best-station counts,
//! and the per-station significance grid.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};

/// Per-station MAE/RMSE plus their arithmetic means across stations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub per_station_mae: Vec<f64>,
    pub per_station_rmse: Vec<f64>,
    pub mae: f64,
    pub rmse: f64,
}

/// Per-station MAE/RMSE over the test axis, averaged across stations.
/// `pred` and `actual` are [stations × test steps] on the original scale.
pub fn mae_rmse_mode(
    pred: &ArrayView2<f64>,
    actual: &ArrayView2<f64>,
    mode: ExecMode,
) -> Result<MetricSet> {
    if pred.dim() != actual.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", actual.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let (g, t) = pred.dim();
    if g == 0 || t == 0 {
        return Err(Error::EmptyRange("metrics over empty matrix".into()));
    }
    let per: Vec<(f64, f64)> = map_indexed(g, mode, |i| {
        let mut abs = 0.0;
        let mut sq = 0.0;
        for j in 0..t {
            let d = pred[[i, j]] - actual[[i, j]];
            abs += d.abs();
            sq += d * d;
        }
        let tf = t as f64;
        (abs / tf, (sq / tf).sqrt())
    });
    let per_station_mae: Vec<f64> = per.iter().map(|p| p.0).collect();
    let per_station_rmse: Vec<f64> = per.iter().map(|p| p.1).collect();
    let gf = g as f64;
    Ok(MetricSet {
        mae: per_station_mae.iter().sum::<f64>() / gf,
        rmse: per_station_rmse.iter().sum::<f64>() / gf,
        per_station_mae,
        per_station_rmse,
    })
}

pub fn mae_rmse(pred: &ArrayView2<f64>, actual: &ArrayView2<f64>) -> Result<MetricSet> {
    mae_rmse_mode(pred, actual, ExecMode::default())
}

/// Percent error reduction relative to a baseline metric.
pub fn boost(baseline_metric: f64, model_metric: f64) -> Result<f64> {
    if !(baseline_metric > 0.0) {
        return Err(Error::InvalidValue(format!(
            "boost baseline must be positive, got {baseline_metric}"
        )));
    }
    Ok(100.0 * (baseline_metric - model_metric) / baseline_metric)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmLoss {
    Absolute,
    Squared,
}

impl std::str::FromStr for DmLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(DmLoss::Absolute),
            "squared" => Ok(DmLoss::Squared),
            _ => Err(Error::Config(format!("unknown dm loss {s:?} (absolute|squared)"))),
        }
    }
}

/// Diebold-Mariano statistic and two-sided normal p-value on the loss
/// differential of two forecast-error series. Long-run variance uses
/// Newey-West with Bartlett weights and `horizon − 1` lags (horizon 1 means
/// the plain variance). Negative statistic: series `a` is the better
/// forecast. An all-zero differential returns (0, 1); a zero long-run
/// variance with nonzero mean returns (±∞, 0).
pub fn dm_test(errors_a: &[f64], errors_b: &[f64], loss: DmLoss, horizon: usize) -> Result<(f64, f64)> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} error values", errors_a.len()),
            got: format!("{}", errors_b.len()),
        });
    }
    let n = errors_a.len();
    if n < 10 {
        return Err(Error::EmptyRange(format!("dm test needs >= 10 points, got {n}")));
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let d: Vec<f64> = errors_a
        .iter()
        .zip(errors_b.iter())
        .map(|(&a, &b)| match loss {
            DmLoss::Absolute => a.abs() - b.abs(),
            DmLoss::Squared => a * a - b * b,
        })
        .collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok((0.0, 1.0));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;

    let gamma = |k: usize| -> f64 {
        let mut acc = 0.0;
        for t in k..n {
            acc += (d[t] - mean) * (d[t - k] - mean);
        }
        acc / nf
    };
    let mut lrv = gamma(0);
    for k in 1..horizon {
        let weight = 1.0 - k as f64 / horizon as f64;
        lrv += 2.0 * weight * gamma(k);
    }
    if lrv <= 0.0 {
        let stat = if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok((stat, 0.0));
    }
    let stat = mean / (lrv / nf).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * (1.0 - normal.cdf(stat.abs()));
    Ok((stat, p))
}

/// For each station, the index of the model with the lowest metric; ties go
/// to the lowest model index. Returns per-model win counts.
pub fn best_station_counts(per_model_metrics: &[Vec<f64>]) -> Result<Vec<usize>> {
    let m = per_model_metrics.len();
    if m == 0 {
        return Err(Error::EmptyRange("no models".into()));
    }
    let g = per_model_metrics[0].len();
    if g == 0 {
        return Err(Error::EmptyRange("no stations".into()));
    }
    if per_model_metrics.iter().any(|v| v.len() != g) {
        return Err(Error::ShapeMismatch {
            expected: format!("{g} stations per model"),
            got: "mismatched per-model vectors".into(),
        });
    }
    let mut counts = vec![0usize; m];
    for s in 0..g {
        let mut best = 0usize;
        for k in 1..m {
            if per_model_metrics[k][s] < per_model_metrics[best][s] {
                best = k;
            }
        }
        counts[best] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmOutcome {
    ModelBetter,
    BaselineBetter,
    Inconclusive,
}

impl DmOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            DmOutcome::ModelBetter => "model_better",
            DmOutcome::BaselineBetter => "baseline_better",
            DmOutcome::Inconclusive => "inconclusive",
        }
    }
}

/// Classifies one DM result at significance level `alpha`.
pub fn dm_outcome(stat: f64, p: f64, alpha: f64) -> DmOutcome {
    if p < alpha {
        if stat < 0.0 {
            DmOutcome::ModelBetter
        } else {
            DmOutcome::BaselineBetter
        }
    } else {
        DmOutcome::Inconclusive
    }
}

/// Per-station DM trichotomy of a model against each baseline. Error
/// matrices are [stations × test steps] of signed errors (pred − actual).
pub fn dm_grid_mode(
    model_errors: &ArrayView2<f64>,
    baseline_errors: &[(String, Array2<f64>)],
    loss: DmLoss,
    horizon: usize,
    alpha: f64,
    mode: ExecMode,
) -> Result<Vec<(String, Vec<DmOutcome>)>> {
    let g = model_errors.nrows();
    let mut out = Vec::with_capacity(baseline_errors.len());
    for (name, be) in baseline_errors {
        if be.dim() != model_errors.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} error matrix for {name}", model_errors.dim()),
                got: format!("{:?}", be.dim()),
            });
        }
        let cells: Vec<Result<DmOutcome>> = map_indexed(g, mode, |s| {
            let ea: Vec<f64> = model_errors.row(s).to_vec();
            let eb: Vec<f64> = be.row(s).to_vec();
            let (stat, p) = dm_test(&ea, &eb, loss, horizon)?;
            Ok(dm_outcome(stat, p, alpha))
        });
        let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
        out.push((name.clone(), cells));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn mae_rmse_hand_values() {
        let pred = array![[2.0, 4.0]];
        let actual = array![[1.0, 2.0]];
        let m = mae_rmse(&pred.view(), &actual.view()).unwrap();
        assert_eq!(m.mae, 1.5);
        assert_abs_diff_eq!(m.rmse, 2.5_f64.sqrt(), epsilon = 1e-12);
        let m0 = mae_rmse(&pred.view(), &pred.view()).unwrap();
        assert_eq!(m0.mae, 0.0);
        assert_eq!(m0.rmse, 0.0);
    }

    #[test]
    fn rmse_dominates_mae_and_means_decompose() {
        let pred = Array2::from_shape_fn((6, 40), |(i, j)| ((i * 17 + j * 5) % 13) as f64 * 0.7);
        let actual = Array2::from_shape_fn((6, 40), |(i, j)| ((i * 7 + j * 11) % 9) as f64);
        let m = mae_rmse(&pred.view(), &actual.view()).unwrap();
        for s in 0..6 {
            assert!(m.per_station_rmse[s] >= m.per_station_mae[s]);
        }
        let mean_mae: f64 = m.per_station_mae.iter().sum::<f64>() / 6.0;
        assert_abs_diff_eq!(m.mae, mean_mae, epsilon = 1e-9);
    }

    #[test]
    fn boost_reference_values() {
        assert_abs_diff_eq!(boost(10.048, 8.397).unwrap(), 16.431, epsilon = 5e-4);
        assert_abs_diff_eq!(boost(27.26, 20.124).unwrap(), 26.178, epsilon = 5e-4);
        assert_eq!(boost(5.0, 5.0).unwrap(), 0.0);
        assert!(boost(0.0, 1.0).is_err());
        // Sign convention: a worse model gives a negative boost of the same
        // magnitude as the mirrored improvement at equal absolute change.
        let up = boost(10.0, 8.0).unwrap();
        let down = boost(10.0, 12.0).unwrap();
        assert_eq!(up, -down);
    }

    #[test]
    fn dm_degenerate_and_antisymmetry() {
        let e: Vec<f64> = (0..50).map(|i| (i % 7) as f64 - 3.0).collect();
        assert_eq!(dm_test(&e, &e, DmLoss::Absolute, 1).unwrap(), (0.0, 1.0));

        let a: Vec<f64> = (0..100).map(|i| ((i * 13 % 23) as f64 - 11.0) * 0.3).collect();
        let b: Vec<f64> = (0..100).map(|i| ((i * 7 % 19) as f64 - 9.0) * 0.8).collect();
        let (s1, p1) = dm_test(&a, &b, DmLoss::Absolute, 1).unwrap();
        let (s2, p2) = dm_test(&b, &a, DmLoss::Absolute, 1).unwrap();
        assert_abs_diff_eq!(s1, -s2, epsilon = 1e-12);
        assert_abs_diff_eq!(p1, p2, epsilon = 1e-12);
    }

    #[test]
    fn dm_halved_errors_significant() {
        let b: Vec<f64> = (0..100)
            .map(|i| 2.0 + ((i * 31 % 17) as f64 - 8.0) * 0.1)
            .collect();
        let a: Vec<f64> = b.iter().map(|v| v / 2.0).collect();
        let (stat, p) = dm_test(&a, &b, DmLoss::Absolute, 1).unwrap();
        assert!(stat < 0.0);
        assert!(p < 0.05);
        let (stat_sq, p_sq) = dm_test(&a, &b, DmLoss::Squared, 1).unwrap();
        assert!(stat_sq < 0.0);
        assert!(p_sq < 0.05);
    }

    #[test]
    fn dm_length_guards() {
        let short = vec![1.0; 5];
        assert!(dm_test(&short, &short, DmLoss::Absolute, 1).is_err());
        let a = vec![1.0; 20];
        let b = vec![1.0; 21];
        assert!(dm_test(&a, &b, DmLoss::Absolute, 1).is_err());
    }

    #[test]
    fn dm_multi_horizon_uses_bartlett_weights() {
        let a: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).cos() * 1.5).collect();
        let (s1, _) = dm_test(&a, &b, DmLoss::Absolute, 1).unwrap();
        let (s3, p3) = dm_test(&a, &b, DmLoss::Absolute, 3).unwrap();
        assert!(s1.is_finite() && s3.is_finite());
        assert!(s1 != s3);
        assert!((0.0..=1.0).contains(&p3));
    }

    #[test]
    fn best_station_counting_rules() {
        // model 0 wins station 0; tie on station 1 goes to model 0; model 2
        // wins station 2.
        let metrics = vec![
            vec![1.0, 2.0, 9.0],
            vec![5.0, 2.0, 8.0],
            vec![6.0, 3.0, 1.0],
        ];
        let counts = best_station_counts(&metrics).unwrap();
        assert_eq!(counts, vec![2, 0, 1]);
        assert_eq!(counts.iter().sum::<usize>(), 3);

        let dominant = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(best_station_counts(&dominant).unwrap(), vec![2, 0]);

        let identical = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(best_station_counts(&identical).unwrap(), vec![2, 0]);
    }

    #[test]
    fn dm_grid_trichotomy() {
        let t = 64;
        let model = Array2::from_shape_fn((3, t), |(s, j)| {
            let base = 1.0 + ((j * 29 % 13) as f64 - 6.0) * 0.05;
            match s {
                0 => base * 0.5, // clearly better
                1 => base * 2.0, // clearly worse
                _ => base,       // identical
            }
        });
        let baseline = Array2::from_shape_fn((3, t), |(_, j)| {
            1.0 + ((j * 29 % 13) as f64 - 6.0) * 0.05
        });
        let grid = dm_grid_mode(
            &model.view(),
            &[("nf".to_string(), baseline)],
            DmLoss::Absolute,
            1,
            0.05,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(grid.len(), 1);
        let cells = &grid[0].1;
        assert_eq!(cells[0], DmOutcome::ModelBetter);
        assert_eq!(cells[1], DmOutcome::BaselineBetter);
        assert_eq!(cells[2], DmOutcome::Inconclusive);
    }

    #[test]
    fn parallel_evaluation_is_bit_identical() {
        let pred = Array2::from_shape_fn((9, 50), |(i, j)| (i as f64 * 1.37 + j as f64 * 0.11).sin() * 5.0 + 6.0);
        let actual = Array2::from_shape_fn((9, 50), |(i, j)| (i as f64 * 0.91 + j as f64 * 0.13).cos() * 4.0 + 6.0);
        let seq = mae_rmse_mode(&pred.view(), &actual.view(), ExecMode::Sequential).unwrap();
        #[cfg(feature = "parallel")]
        {
            let par = mae_rmse_mode(&pred.view(), &actual.view(), ExecMode::Parallel).unwrap();
            assert_eq!(seq, par);
        }
        let _ = seq;
    }
}
