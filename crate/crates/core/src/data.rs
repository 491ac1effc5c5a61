//! Panels, feature windows, and range-scoped normalization.
//!
//! A `FlowPanel` holds one city's inflow series as a dense stations × steps
//! matrix with an implicit evenly spaced time axis (start + k * granularity),
//! so uneven spacing is unrepresentable after loading. Feature bundles and
//! normalizer fits take explicit step ranges; everything downstream of a fit
//! sees only the columns it was given.

use std::ops::Range;
use std::sync::Arc;

use chrono::{NaiveDateTime, TimeDelta};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationSet {
    city: String,
    ids: Vec<String>,
}

impl StationSet {
    pub fn new(city: impl Into<String>, ids: Vec<String>) -> Result<Self> {
        let city = city.into();
        if ids.is_empty() {
            return Err(Error::Data(format!("city {city}: no stations")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if id.is_empty() {
                return Err(Error::Data(format!("city {city}: empty station id")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("city {city}: duplicate station id {id}")));
            }
        }
        Ok(StationSet { city, ids })
    }

    pub fn city(&self) -> &str {
        &self.city
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }
}

#[derive(Clone, Debug)]
pub struct FlowPanel {
    stations: StationSet,
    start: NaiveDateTime,
    granularity_min: u32,
    /// stations × steps
    values: Array2<f64>,
}

impl FlowPanel {
    pub fn new(
        stations: StationSet,
        start: NaiveDateTime,
        granularity_min: u32,
        values: Array2<f64>,
    ) -> Result<Self> {
        if granularity_min == 0 || 1440 % granularity_min != 0 {
            return Err(Error::Data(format!(
                "granularity {granularity_min} min must divide a day"
            )));
        }
        if values.nrows() != stations.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} station rows", stations.len()),
                got: format!("{}", values.nrows()),
            });
        }
        if values.ncols() == 0 {
            return Err(Error::EmptyRange("panel has no time steps".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite flow value {bad}")));
        }
        Ok(FlowPanel {
            stations,
            start,
            granularity_min,
            values,
        })
    }

    pub fn stations(&self) -> &StationSet {
        &self.stations
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn granularity_min(&self) -> u32 {
        self.granularity_min
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.granularity_min) as usize
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + TimeDelta::minutes(self.granularity_min as i64 * step as i64)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        FlowPanel::new(
            self.stations.clone(),
            self.start,
            self.granularity_min,
            values,
        )
    }

    /// Last `test_days` form the test range; the `train_days` before them the
    /// train range. Both are step ranges into this panel.
    pub fn train_test_ranges(
        &self,
        train_days: usize,
        test_days: usize,
    ) -> Result<(Range<usize>, Range<usize>)> {
        if train_days == 0 || test_days == 0 {
            return Err(Error::Config("train_days and test_days must be positive".into()));
        }
        let spd = self.steps_per_day();
        let need = (train_days + test_days) * spd;
        let total = self.n_steps();
        if need > total {
            return Err(Error::EmptyRange(format!(
                "panel has {total} steps but {train_days}+{test_days} days need {need}"
            )));
        }
        let test_start = total - test_days * spd;
        let train_start = test_start - train_days * spd;
        Ok((train_start..test_start, test_start..total))
    }
}

/// Named covariate series on the same time axis as a flow panel.
#[derive(Clone, Debug)]
pub struct CovariatePanel {
    names: Vec<String>,
    start: NaiveDateTime,
    granularity_min: u32,
    /// covariates × steps
    values: Array2<f64>,
}

impl CovariatePanel {
    pub fn new(
        names: Vec<String>,
        start: NaiveDateTime,
        granularity_min: u32,
        values: Array2<f64>,
    ) -> Result<Self> {
        if names.len() != values.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} covariate rows", names.len()),
                got: format!("{}", values.nrows()),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite covariate value {bad}")));
        }
        Ok(CovariatePanel {
            names,
            start,
            granularity_min,
            values,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        CovariatePanel::new(self.names.clone(), self.start, self.granularity_min, values)
    }

    fn check_aligned(&self, panel: &FlowPanel) -> Result<()> {
        if self.start != panel.start()
            || self.granularity_min != panel.granularity_min()
            || self.n_steps() != panel.n_steps()
        {
            return Err(Error::Alignment(format!(
                "covariate axis ({}, {} min, {} steps) != flow axis ({}, {} min, {} steps)",
                self.start,
                self.granularity_min,
                self.n_steps(),
                panel.start(),
                panel.granularity_min(),
                panel.n_steps()
            )));
        }
        Ok(())
    }
}

/// Lag window: each feature row is `h` lagged values followed by their mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub h: usize,
}

impl WindowSpec {
    pub fn new(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("window length h must be >= 1".into()));
        }
        Ok(WindowSpec { h })
    }

    /// Feature row width: the lags plus the window mean.
    pub fn width(&self) -> usize {
        self.h + 1
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { h: 5 }
    }
}

/// One supervised instance at step `t`: per-station lag rows `l`, dynamic
/// covariate rows `d`, the shared static matrix `a`, and the step-`t`
/// targets. Flow windows are strictly lagged; dynamic covariate windows end
/// at `t` inclusive, since weather and air quality are exogenous observables
/// synchronous with the flows they modulate.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub t: usize,
    /// stations × window width, steps t-h..t-1 plus their mean
    pub l: Array2<f64>,
    /// dynamic covariates × window width, steps t-h+1..t plus their mean
    pub d: Array2<f64>,
    /// stations × static covariates, shared across bundles
    pub a: Arc<Array2<f64>>,
    pub target: Array1<f64>,
}

fn window_rows(values: &ArrayView2<f64>, t: usize, h: usize) -> Array2<f64> {
    let n = values.nrows();
    let mut out = Array2::zeros((n, h + 1));
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..h {
            let v = values[[i, t - h + j]];
            out[[i, j]] = v;
            sum += v;
        }
        out[[i, h]] = sum / h as f64;
    }
    out
}

/// Builds one bundle per step in `targets` (each step must have `h` history
/// steps before it inside the panel).
pub fn build_feature_bundles(
    flow: &FlowPanel,
    dynamics: &CovariatePanel,
    statics: &Arc<Array2<f64>>,
    spec: WindowSpec,
    targets: Range<usize>,
) -> Result<Vec<FeatureBundle>> {
    dynamics.check_aligned(flow)?;
    if statics.nrows() != flow.stations().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} static rows", flow.stations().len()),
            got: format!("{}", statics.nrows()),
        });
    }
    if targets.start < spec.h {
        return Err(Error::EmptyRange(format!(
            "target step {} has fewer than h={} history steps",
            targets.start, spec.h
        )));
    }
    if targets.end > flow.n_steps() {
        return Err(Error::EmptyRange(format!(
            "target range ends at {} but panel has {} steps",
            targets.end,
            flow.n_steps()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptyRange("no target steps".into()));
    }
    let fv = flow.values().view();
    let dv = dynamics.values().view();
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        out.push(FeatureBundle {
            t,
            l: window_rows(&fv, t, spec.h),
            // Shifted one step forward relative to the flow window so the
            // step-t covariate values are visible to the model.
            d: window_rows(&dv, t + 1, spec.h),
            a: Arc::clone(statics),
            target: flow.values().column(t).to_owned(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    MinMax,
    ZScore,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct SeriesStats {
    /// transform: (x - shift) / scale; scale == 0 marks a constant series,
    /// which maps to 0 and inverts to the shift.
    shift: f64,
    scale: f64,
}

impl SeriesStats {
    fn fit(kind: NormKind, xs: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let n = xs.clone().count();
        if n == 0 {
            return Err(Error::EmptyRange("cannot fit normalizer on empty series".into()));
        }
        match kind {
            NormKind::MinMax => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for x in xs {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                Ok(SeriesStats {
                    shift: lo,
                    scale: hi - lo,
                })
            }
            NormKind::ZScore => {
                let mean = xs.clone().sum::<f64>() / n as f64;
                let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                Ok(SeriesStats {
                    shift: mean,
                    scale: var.sqrt(),
                })
            }
        }
    }

    fn transform(&self, x: f64) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            (x - self.shift) / self.scale
        }
    }

    fn invert(&self, y: f64) -> f64 {
        if self.scale == 0.0 {
            self.shift
        } else {
            y * self.scale + self.shift
        }
    }
}

/// Axis a normalizer's per-series statistics run along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// One statistic per matrix row (e.g. per station over time).
    Rows,
    /// One statistic per matrix column (e.g. per covariate across stations).
    Cols,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Normalizer {
    kind: NormKind,
    axis: NormAxis,
    stats: Vec<SeriesStats>,
}

impl Normalizer {
    /// Fits per-row statistics using only the columns in `cols`.
    pub fn fit_rows(kind: NormKind, data: &ArrayView2<f64>, cols: Range<usize>) -> Result<Self> {
        if cols.end > data.ncols() || cols.is_empty() {
            return Err(Error::EmptyRange(format!(
                "fit range {cols:?} invalid for {} columns",
                data.ncols()
            )));
        }
        let stats = (0..data.nrows())
            .map(|i| {
                SeriesStats::fit(
                    kind,
                    cols.clone().map({
                        let row = data.row(i);
                        move |j| row[j]
                    }),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Normalizer {
            kind,
            axis: NormAxis::Rows,
            stats,
        })
    }

    /// Fits per-column statistics over all rows.
    pub fn fit_cols(kind: NormKind, data: &ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyRange("cannot fit on zero rows".into()));
        }
        let stats = (0..data.ncols())
            .map(|j| {
                SeriesStats::fit(
                    kind,
                    (0..data.nrows()).map({
                        let col = data.column(j);
                        move |i| col[i]
                    }),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Normalizer {
            kind,
            axis: NormAxis::Cols,
            stats,
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn n_series(&self) -> usize {
        self.stats.len()
    }

    fn check(&self, data: &ArrayView2<f64>) -> Result<()> {
        let got = match self.axis {
            NormAxis::Rows => data.nrows(),
            NormAxis::Cols => data.ncols(),
        };
        if got != self.stats.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} series along {:?}", self.stats.len(), self.axis),
                got: format!("{got}"),
            });
        }
        Ok(())
    }

    fn map(&self, data: &ArrayView2<f64>, invert: bool) -> Result<Array2<f64>> {
        self.check(data)?;
        let mut out = data.to_owned();
        for ((i, j), v) in out.indexed_iter_mut() {
            let s = &self.stats[match self.axis {
                NormAxis::Rows => i,
                NormAxis::Cols => j,
            }];
            *v = if invert { s.invert(*v) } else { s.transform(*v) };
        }
        Ok(out)
    }

    pub fn transform(&self, data: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.map(data, false)
    }

    pub fn invert(&self, data: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.map(data, true)
    }

    pub fn transform_value(&self, series: usize, x: f64) -> f64 {
        self.stats[series].transform(x)
    }

    pub fn invert_value(&self, series: usize, y: f64) -> f64 {
        self.stats[series].invert(y)
    }
}
