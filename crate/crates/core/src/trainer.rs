//! Shared training plumbing: hyperparameters, seeded epoch batching, and
//! bundle-row stacking so each optimizer step runs one fat matrix pass.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureBundle;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    /// Bundles (time steps) per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 100,
            batch: 256,
            lr: 0.001,
            hidden: 128,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainParams {
    /// Zero epochs is allowed: transfer variants are testable at exactly
    /// their initialization.
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub fn require_bundles(bundles: &[FeatureBundle], what: &str) -> Result<()> {
    if bundles.is_empty() {
        return Err(Error::Data(format!("no {what} bundles: insufficient data")));
    }
    Ok(())
}

/// Source and target bundles must describe the same time steps.
pub fn check_paired(source: &[FeatureBundle], target: &[FeatureBundle]) -> Result<()> {
    if source.len() != target.len() {
        return Err(Error::Alignment(format!(
            "source has {} bundles, target {}",
            source.len(),
            target.len()
        )));
    }
    for (s, t) in source.iter().zip(target) {
        if s.t != t.t {
            return Err(Error::Alignment(format!(
                "bundle time mismatch: source t={}, target t={}",
                s.t, t.t
            )));
        }
    }
    Ok(())
}

/// One epoch's batch schedule: a seeded shuffle of bundle indices, chunked.
pub fn shuffled_batches(rng: &mut impl Rng, n_bundles: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_bundles).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Stacks the flow windows of the selected bundles into one matrix
/// [k*n x width] (bundle-major, station order within a bundle) together with
/// the matching target column [k*n x 1].
pub fn stack_flow_rows(bundles: &[FeatureBundle], idxs: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let n = bundles[idxs[0]].l.nrows();
    let width = bundles[idxs[0]].l.ncols();
    let mut x = Array2::zeros((idxs.len() * n, width));
    let mut y = Array2::zeros((idxs.len() * n, 1));
    for (bi, &idx) in idxs.iter().enumerate() {
        let b = &bundles[idx];
        x.slice_mut(ndarray::s![bi * n..(bi + 1) * n, ..]).assign(&b.l);
        for s in 0..n {
            y[[bi * n + s, 0]] = b.target[s];
        }
    }
    (x, y)
}

/// Vertically stacks per-bundle row blocks of equal width.
pub fn stack_views(blocks: &[ArrayView2<f64>]) -> Array2<f64> {
    let width = blocks[0].ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Array2::zeros((rows, width));
    let mut at = 0;
    for b in blocks {
        out.slice_mut(ndarray::s![at..at + b.nrows(), ..]).assign(b);
        at += b.nrows();
    }
    out
}

/// Running mean of per-batch losses weighted by row count.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochAccum {
    sum: f64,
    rows: usize,
}

impl EpochAccum {
    pub fn add(&mut self, batch_loss: f64, rows: usize) {
        self.sum += batch_loss * rows as f64;
        self.rows += rows;
    }

    pub fn mean(&self) -> f64 {
        if self.rows == 0 {
            f64::NAN
        } else {
            self.sum / self.rows as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batches = shuffled_batches(&mut rng, 10, 3);
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_schedule_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(shuffled_batches(&mut a, 50, 8), shuffled_batches(&mut b, 50, 8));
    }

    #[test]
    fn stacking_preserves_bundle_and_station_order() {
        let a = Arc::new(Array2::zeros((2, 1)));
        let bundles: Vec<FeatureBundle> = (0..3)
            .map(|t| FeatureBundle {
                t,
                l: array![[t as f64, 1.0], [t as f64 + 0.5, 2.0]],
                d: Array2::zeros((1, 2)),
                a: a.clone(),
                target: array![10.0 * t as f64, 10.0 * t as f64 + 5.0],
            })
            .collect();
        let (x, y) = stack_flow_rows(&bundles, &[2, 0]);
        assert_eq!(x.nrows(), 4);
        assert_eq!(x[[0, 0]], 2.0);
        assert_eq!(x[[1, 0]], 2.5);
        assert_eq!(x[[2, 0]], 0.0);
        assert_eq!(y[[0, 0]], 20.0);
        assert_eq!(y[[3, 0]], 5.0);
    }

    #[test]
    fn stack_views_concatenates_in_order() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 4.0], [5.0, 6.0]];
        let out = stack_views(&[a.view(), b.view()]);
        assert_eq!(out, array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
    }

    #[test]
    fn accumulator_weights_by_rows() {
        let mut acc = EpochAccum::default();
        acc.add(1.0, 2);
        acc.add(4.0, 6);
        assert!((acc.mean() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(TrainParams::default().validate().is_ok());
        assert!(TrainParams { epochs: 0, ..Default::default() }.validate().is_ok());
        assert!(TrainParams { batch: 0, ..Default::default() }.validate().is_err());
        assert!(TrainParams { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainParams { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
