//! Cross-city station matching: similarity matrix Si, best-match indicator
//! AJ, and their elementwise product We, plus the source→target row
//! transforms used during fusion.
//!
//! Arithmetic here follows a fixed canonical order (means as sum/n, moment
//! sums in index order, row scans left to right) so an independent
//! reimplementation can reproduce every entry bit for bit.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::data::FlowPanel;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};

/// Sample Pearson coefficient, clamped to [−1, 1]. A constant sequence has no
/// correlation evidence and yields 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", x.len()),
            got: format!("{}", y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyRange("pearson needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut ssx = 0.0;
    let mut ssy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        num += dx * dy;
        ssx += dx * dx;
        ssy += dy * dy;
    }
    if ssx == 0.0 || ssy == 0.0 {
        return Ok(0.0);
    }
    Ok((num / (ssx.sqrt() * ssy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Aj,
    We,
    Si,
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransformKind::Aj => "aj",
            TransformKind::We => "we",
            TransformKind::Si => "si",
        })
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aj" => Ok(TransformKind::Aj),
            "we" => Ok(TransformKind::We),
            "si" => Ok(TransformKind::Si),
            _ => Err(Error::Config(format!("unknown transform kind {s:?} (aj|we|si)"))),
        }
    }
}

/// Rows are target stations, columns source stations.
#[derive(Clone, Debug)]
pub struct StationMatch {
    source_ids: Vec<String>,
    target_ids: Vec<String>,
    si: Array2<f64>,
    aj: Array2<f64>,
    we: Array2<f64>,
    pairs: Vec<usize>,
}

impl StationMatch {
    pub fn si(&self) -> &Array2<f64> {
        &self.si
    }

    pub fn aj(&self) -> &Array2<f64> {
        &self.aj
    }

    pub fn we(&self) -> &Array2<f64> {
        &self.we
    }

    /// pairs[g] = source index whose similarity is maximal for target g.
    pub fn pairs(&self) -> &[usize] {
        &self.pairs
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn target_ids(&self) -> &[String] {
        &self.target_ids
    }

    pub fn n_source(&self) -> usize {
        self.source_ids.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_ids.len()
    }

    /// Per-target similarity of the chosen pair, clipped below at 0.
    pub fn pair_weights(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(g, &s)| self.si[[g, s]].max(0.0))
            .collect()
    }

    /// The [n_target x n_source] linear map that `transform` applies.
    /// Exposed so callers that need gradients can push them back through
    /// the transpose.
    pub fn mixing_matrix(&self, kind: TransformKind, raw_si: bool) -> Array2<f64> {
        let (g_count, s_count) = (self.n_target(), self.n_source());
        let mut m = Array2::zeros((g_count, s_count));
        match kind {
            TransformKind::Aj => {
                for g in 0..g_count {
                    m[[g, self.pairs[g]]] = 1.0;
                }
            }
            TransformKind::We => {
                for g in 0..g_count {
                    let s = self.pairs[g];
                    m[[g, s]] = self.we[[g, s]];
                }
            }
            TransformKind::Si => {
                for g in 0..g_count {
                    if raw_si {
                        m.row_mut(g).assign(&self.si.row(g));
                        continue;
                    }
                    let clipped: Vec<f64> = self.si.row(g).iter().map(|w| w.max(0.0)).collect();
                    let sum: f64 = clipped.iter().sum();
                    if sum > 0.0 {
                        for (s, w) in clipped.iter().enumerate() {
                            m[[g, s]] = w / sum;
                        }
                    } else {
                        m[[g, self.pairs[g]]] = 1.0;
                    }
                }
            }
        }
        m
    }

    /// Maps per-source rows onto target rows. AJ gathers the paired row
    /// unchanged; We scales the paired row by its similarity; Si mixes all
    /// source rows, by default with rows clipped at 0 and normalized to sum 1
    /// (`raw_si` disables that and multiplies by Si as stored). A clipped Si
    /// row with no positive mass falls back to the AJ one-hot.
    pub fn transform(
        &self,
        source_rows: &ArrayView2<f64>,
        kind: TransformKind,
        raw_si: bool,
    ) -> Result<Array2<f64>> {
        let s_count = self.n_source();
        if source_rows.nrows() != s_count {
            return Err(Error::ShapeMismatch {
                expected: format!("{s_count} source rows"),
                got: format!("{}", source_rows.nrows()),
            });
        }
        let k = source_rows.ncols();
        let g_count = self.n_target();
        let mut out = Array2::zeros((g_count, k));
        match kind {
            TransformKind::Aj => {
                for g in 0..g_count {
                    out.row_mut(g).assign(&source_rows.row(self.pairs[g]));
                }
            }
            TransformKind::We => {
                for g in 0..g_count {
                    let s = self.pairs[g];
                    let w = self.we[[g, s]];
                    for j in 0..k {
                        out[[g, j]] = w * source_rows[[s, j]];
                    }
                }
            }
            TransformKind::Si => {
                for g in 0..g_count {
                    let mut weights: Vec<f64> = self.si.row(g).to_vec();
                    if !raw_si {
                        let mut sum = 0.0;
                        for w in &mut weights {
                            *w = w.max(0.0);
                            sum += *w;
                        }
                        if sum > 0.0 {
                            for w in &mut weights {
                                *w /= sum;
                            }
                        } else {
                            weights.iter_mut().for_each(|w| *w = 0.0);
                            weights[self.pairs[g]] = 1.0;
                        }
                    }
                    for j in 0..k {
                        let mut acc = 0.0;
                        for (s, w) in weights.iter().enumerate() {
                            acc += w * source_rows[[s, j]];
                        }
                        out[[g, j]] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes si.csv, aj.csv, we.csv (matrix layout with station-id headers)
    /// and pairs.csv (target, chosen source, similarity) into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        for (name, m) in [("si.csv", &self.si), ("aj.csv", &self.aj), ("we.csv", &self.we)] {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            let mut header = vec!["target_id".to_string()];
            header.extend(self.source_ids.iter().cloned());
            w.write_record(&header)?;
            for (g, tid) in self.target_ids.iter().enumerate() {
                let mut rec = vec![tid.clone()];
                rec.extend(m.row(g).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        let mut w = csv::Writer::from_path(dir.join("pairs.csv"))?;
        w.write_record(["target_id", "source_id", "similarity"])?;
        for (g, tid) in self.target_ids.iter().enumerate() {
            let s = self.pairs[g];
            w.write_record([
                tid.as_str(),
                self.source_ids[s].as_str(),
                &self.si[[g, s]].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the match from training-range sequences only. Rows are processed
/// independently, so the parallel mode is bit-identical to sequential.
pub fn build_match_mode(
    source: &FlowPanel,
    target: &FlowPanel,
    train_range: Range<usize>,
    mode: ExecMode,
) -> Result<StationMatch> {
    if source.granularity_min() != target.granularity_min() {
        return Err(Error::Alignment(format!(
            "granularity mismatch: source {} min, target {} min",
            source.granularity_min(),
            target.granularity_min()
        )));
    }
    if train_range.is_empty() {
        return Err(Error::EmptyRange("empty training range for matching".into()));
    }
    if train_range.end > source.n_steps() || train_range.end > target.n_steps() {
        return Err(Error::EmptyRange(format!(
            "train range {train_range:?} exceeds panel length ({} source, {} target steps)",
            source.n_steps(),
            target.n_steps()
        )));
    }

    let s_count = source.stations().len();
    let g_count = target.stations().len();
    let sv = source.values();
    let tv = target.values();

    let grab = |m: &Array2<f64>, row: usize| -> Vec<f64> {
        train_range.clone().map(|t| m[[row, t]]).collect()
    };
    let source_seqs: Vec<Vec<f64>> = (0..s_count).map(|s| grab(sv, s)).collect();

    let rows: Vec<Result<Vec<f64>>> = map_indexed(g_count, mode, |g| {
        let tg = grab(tv, g);
        (0..s_count)
            .map(|s| pearson(&tg, &source_seqs[s]))
            .collect()
    });

    let mut si = Array2::zeros((g_count, s_count));
    for (g, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (s, v) in row.into_iter().enumerate() {
            si[[g, s]] = v;
        }
    }

    let mut aj = Array2::zeros((g_count, s_count));
    let mut we = Array2::zeros((g_count, s_count));
    let mut pairs = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let mut best = 0usize;
        for s in 1..s_count {
            if si[[g, s]] > si[[g, best]] {
                best = s;
            }
        }
        aj[[g, best]] = 1.0;
        we[[g, best]] = si[[g, best]];
        pairs.push(best);
    }

    Ok(StationMatch {
        source_ids: source.stations().ids().to_vec(),
        target_ids: target.stations().ids().to_vec(),
        si,
        aj,
        we,
        pairs,
    })
}

pub fn build_match(
    source: &FlowPanel,
    target: &FlowPanel,
    train_range: Range<usize>,
) -> Result<StationMatch> {
    build_match_mode(source, target, train_range, ExecMode::default())
}
