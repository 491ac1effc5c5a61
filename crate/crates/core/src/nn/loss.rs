//! Losses with analytic gradients.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Mean absolute error over all entries; gradient w.r.t. `pred` is
/// sign(pred−actual)/n with sign(0) = 0.
pub fn mae_loss(pred: &ArrayView2<f64>, actual: &ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != actual.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", actual.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::EmptyRange("mae over zero elements".into()));
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((idx, &p), &a) in pred.indexed_iter().zip(actual.iter()) {
        let d = p - a;
        value += d.abs();
        grad[idx] = if d > 0.0 {
            1.0 / nf
        } else if d < 0.0 {
            -1.0 / nf
        } else {
            0.0
        };
    }
    Ok((value / nf, grad))
}

/// Weighted mean of row-wise euclidean distances between `f` and a fixed
/// reference: (1/n)·Σ_i w_i·‖f[i] − f_ref[i]‖₂. Returns the gradient w.r.t.
/// `f`; a zero-distance row contributes zero gradient (subgradient choice at
/// the kink).
pub fn weighted_row_distance(
    f: &ArrayView2<f64>,
    f_ref: &ArrayView2<f64>,
    weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    if f.dim() != f_ref.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", f_ref.dim()),
            got: format!("{:?}", f.dim()),
        });
    }
    if weights.len() != f.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", f.nrows()),
            got: format!("{}", weights.len()),
        });
    }
    let n = f.nrows();
    if n == 0 {
        return Err(Error::EmptyRange("distance over zero rows".into()));
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(f.raw_dim());
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..f.ncols() {
            let d = f[[i, j]] - f_ref[[i, j]];
            sq += d * d;
        }
        let dist = sq.sqrt();
        value += weights[i] * dist;
        if dist > 0.0 && weights[i] != 0.0 {
            let scale = weights[i] / (nf * dist);
            for j in 0..f.ncols() {
                grad[[i, j]] = scale * (f[[i, j]] - f_ref[[i, j]]);
            }
        }
    }
    Ok((value / nf, grad))
}
